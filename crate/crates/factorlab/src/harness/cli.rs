//! Command line interface.
//!
//! Exit codes: 0 on success (including help and version), 2 on a usage
//! error, 1 on a runtime failure or a failed verification.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::world::shipped_fixture_path;

use super::config::ExperimentConfig;
use super::runner::{
    run_grad_check, run_leave_one_out, run_one_to_one, run_pca, verify_fixture, write_pca,
    write_run, RunSummary,
};
use super::HarnessError;

#[derive(Debug, Parser)]
#[command(
    name = "factorlab",
    version,
    about = "Adaptation experiments over a synthetic factor world"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every ordered source/target pair and tabulate transfer accuracy.
    One2one {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one cell per target on all remaining domains.
    Leaveoneout {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Decompose an accuracy table into principal components.
    Pca {
        /// CSV of `source,target,accuracy` rows; defaults to the shipped
        /// reference table.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Placeholder written on the diagonal before the decomposition.
        #[arg(long, default_value_t = 1.0)]
        fill: f64,
        /// Leading components to keep in the summary.
        #[arg(long, default_value_t = 3)]
        components: usize,
        /// Also write matrix.csv and pca.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients of random networks with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        nets: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Recompute and verify the marginals of the shipped accuracy table.
    FixtureVerify {
        /// Alternative table to load; marginal targets stay those of the
        /// shipped table.
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

/// Parses `args` and runs the selected command, returning the process exit
/// code instead of exiting, so tests can drive the CLI in-process.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn print_run(summary: &RunSummary, cfg: &ExperimentConfig) {
    print!("{}", summary.results_csv());
    println!("wrote {}", cfg.output.dir.display());
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::One2one { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run_one_to_one(&cfg)?;
            write_run(&cfg, &summary)?;
            print_run(&summary, &cfg);
            Ok(())
        }
        Command::Leaveoneout { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run_leave_one_out(&cfg)?;
            write_run(&cfg, &summary)?;
            print_run(&summary, &cfg);
            Ok(())
        }
        Command::Pca {
            input,
            fill,
            components,
            out,
        } => {
            let path = input.unwrap_or_else(shipped_fixture_path);
            let run = run_pca(&path, fill, components)?;
            print!("{}", run.summary.to_csv());
            match &run.grouping {
                Some(grouping) => {
                    let groups = grouping.groups();
                    for (value, indices) in groups {
                        let ids: Vec<usize> = indices.iter().map(|i| i + 1).collect();
                        println!("pc1 {value}: {ids:?}");
                    }
                }
                None => println!("pc1 grouping: degenerate activation at zero"),
            }
            if let Some(dir) = out {
                write_pca(&dir, &run)?;
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
        Command::Gradcheck { nets, seed } => {
            let report = run_grad_check(nets, seed)?;
            println!(
                "nets: {}  worst relative error: {:.3e}  sentinel error: {:.3}",
                report.nets, report.worst, report.sentinel_error
            );
            if report.passed() {
                println!("gradcheck: pass");
                Ok(())
            } else {
                Err(HarnessError::Failed(format!(
                    "gradcheck failed: worst {:.3e} (limit 1e-4), sentinel {:.3} (needs >= 0.333)",
                    report.worst, report.sentinel_error
                )))
            }
        }
        Command::FixtureVerify { path } => {
            let report = verify_fixture(path.as_deref())?;
            println!(
                "domains: {}  source-10 row avg: {:.4}  target-1 col max: {:.4}  min: {:.4} at {}->{}",
                report.num_domains,
                report.source_10_row_avg,
                report.target_1_col_max,
                report.min_cell.2,
                report.min_cell.0,
                report.min_cell.1
            );
            if report.passed() {
                println!("fixture-verify: pass");
                Ok(())
            } else {
                Err(HarnessError::Failed(
                    "fixture-verify failed: marginals do not match the shipped table".into(),
                ))
            }
        }
    }
}
