//! Sweep execution: dataset preparation, per-cell training, seed
//! aggregation, and deterministic artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adversarial::{
    build_model, evaluate_accuracy, train_step, train_step_label_only, AdaptationState,
    BranchRngs, TrainBatch,
};
use crate::analysis::{pca, sign_grouping, PcaResult, TransferMatrix};
use crate::masking::{grouping_from_factor, masked_train_step, FactorAssignment};
use crate::nn::{grad_check, grad_check_with, lr_schedule, LayerSpec, Network, Tensor};
use crate::world::{
    load_accuracy_fixture, make_world, shipped_fixture_path, split_train_test, Dataset, Sample,
    World,
};

use super::config::{ExperimentConfig, Method};
use super::HarnessError;

/// Sweep shape of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    OneToOne,
    LeaveOneOut,
}

impl RunKind {
    pub fn label(self) -> &'static str {
        match self {
            RunKind::OneToOne => "one2one",
            RunKind::LeaveOneOut => "leaveoneout",
        }
    }
}

/// RNG seed of one experimental cell. The method is deliberately not part of
/// the key: methods with identical randomness consumption stay comparable
/// bit for bit.
pub fn cell_seed(kind: RunKind, sources: &[usize], target: usize, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(kind.label().as_bytes());
    for &s in sources {
        h.update((s as u64).to_le_bytes());
    }
    h.update([0xff]);
    h.update((target as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Sampling seed of one domain's dataset. Keyed by domain and experiment
/// seed only, so every cell of a run sees identical data.
pub fn dataset_seed(domain_id: usize, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"dataset");
    h.update((domain_id as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// One domain's rendered data for one experiment seed. Sources train on
/// `full`; a target contributes `train` unlabeled and is evaluated on `test`.
struct DomainData {
    full: Dataset,
    train: Dataset,
    test: Dataset,
}

fn build_datasets(
    world: &World,
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<(usize, u64), DomainData>, HarnessError> {
    let mut out = BTreeMap::new();
    for spec in &world.domains {
        for &seed in &cfg.experiment.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed(spec.id, seed));
            let full = world.sample_domain(spec, cfg.world.n_per_class, &mut rng)?;
            let (train, test) = split_train_test(&full, cfg.world.chunk)?;
            out.insert((spec.id, seed), DomainData { full, train, test });
        }
    }
    Ok(out)
}

struct Pool<'a> {
    samples: &'a [Sample],
    labeled: bool,
}

/// Uniform two-stage draw: pick a participating domain, then a sample from
/// its pool. Unlabeled pools contribute domain labels only.
fn assemble_batch(
    pools: &[Pool],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch, HarnessError> {
    let mut images = Vec::with_capacity(batch_size);
    let mut class_labels = Vec::with_capacity(batch_size);
    let mut domain_labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let p = rng.random_range(0..pools.len());
        let pool = &pools[p];
        let s = rng.random_range(0..pool.samples.len());
        let sample = &pool.samples[s];
        images.push(sample.image.clone());
        class_labels.push(if pool.labeled { Some(sample.label) } else { None });
        domain_labels.push(p);
    }
    Ok(TrainBatch {
        images: Tensor::stack(&images)?,
        class_labels,
        domain_labels,
    })
}

struct CellPlan {
    name: String,
    sources: Vec<usize>,
    target: usize,
}

struct CellAssignment {
    factor: String,
    by_id: BTreeMap<usize, String>,
}

fn cell_assignment(
    cfg: &ExperimentConfig,
    world: &World,
) -> Result<Option<CellAssignment>, HarnessError> {
    let Some(section) = &cfg.experiment.assignment else {
        return Ok(None);
    };
    if let Some(factor) = &section.factor {
        let assignment = grouping_from_factor(&world.domains, factor)?;
        let mut by_id = BTreeMap::new();
        for (i, spec) in world.domains.iter().enumerate() {
            by_id.insert(spec.id, assignment.value(i)?.to_string());
        }
        Ok(Some(CellAssignment {
            factor: factor.clone(),
            by_id,
        }))
    } else if let Some(values) = &section.values {
        let by_id = world
            .domains
            .iter()
            .zip(values)
            .map(|(spec, v)| (spec.id, v.clone()))
            .collect();
        Ok(Some(CellAssignment {
            factor: "assigned".into(),
            by_id,
        }))
    } else {
        Ok(None)
    }
}

struct CellRun<'a> {
    cfg: &'a ExperimentConfig,
    plan: &'a CellPlan,
    data: &'a BTreeMap<(usize, u64), DomainData>,
    assignment: Option<&'a CellAssignment>,
    kind: RunKind,
}

/// Trains one cell for one seed and returns target test accuracy, or NaN if
/// any step produced a non-finite loss.
fn run_cell(run: &CellRun, seed: u64) -> Result<f64, HarnessError> {
    let cfg = run.cfg;
    let method = cfg.experiment.method;

    let mut participating: Vec<usize> = run.plan.sources.clone();
    if method.uses_target_usv() {
        participating.push(run.plan.target);
    }
    participating.sort_unstable();

    let mut pools = Vec::with_capacity(participating.len());
    for &id in &participating {
        let data = &run.data[&(id, seed)];
        if id == run.plan.target {
            pools.push(Pool {
                samples: &data.train.samples,
                labeled: false,
            });
        } else {
            pools.push(Pool {
                samples: &data.full.samples,
                labeled: true,
            });
        }
    }
    let n_supervised: usize = participating
        .iter()
        .filter(|&&id| id != run.plan.target)
        .map(|&id| run.data[&(id, seed)].full.samples.len())
        .sum();

    let assignment = match (method, run.assignment) {
        (Method::Fpda, Some(a)) => {
            let values: Vec<String> = participating
                .iter()
                .map(|id| {
                    a.by_id.get(id).cloned().ok_or_else(|| {
                        HarnessError::Config(format!("assignment misses domain {id}"))
                    })
                })
                .collect::<Result<_, _>>()?;
            Some(FactorAssignment::new(a.factor.clone(), values)?)
        }
        (Method::Fpda, None) => {
            return Err(HarnessError::Config(
                "method \"fpda\" reached a cell without an assignment".into(),
            ));
        }
        _ => None,
    };

    let cell = cell_seed(run.kind, &run.plan.sources, run.plan.target, seed);
    let mut rngs = BranchRngs::from_seed(cell);
    let arch = cfg.arch_config(pools.len());
    let mut model = build_model(&arch, &mut rngs)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cell);
    batch_rng.set_stream(3);

    let steps_per_epoch = n_supervised.div_ceil(cfg.experiment.batch_size);
    let total_steps = cfg.experiment.epochs * steps_per_epoch;
    let mut state = AdaptationState::new(total_steps)?;
    for _ in 0..total_steps {
        let batch = assemble_batch(&pools, cfg.experiment.batch_size, &mut batch_rng)?;
        let mu = lr_schedule(state.step(), total_steps, cfg.experiment.mu0)?;
        let losses = match method {
            Method::NoDa => train_step_label_only(&mut model, &batch, mu, &mut rngs)?,
            Method::DaNoUsv | Method::DaUsv => {
                train_step(&mut model, &batch, &state, mu, None, &mut rngs)?
            }
            Method::Fpda => masked_train_step(
                &mut model,
                &batch,
                &state,
                mu,
                assignment.as_ref().expect("checked above"),
                &mut rngs,
            )?,
        };
        if !losses.label_loss.is_finite()
            || (method.uses_domain_branch() && !losses.domain_loss.is_finite())
        {
            return Ok(f64::NAN);
        }
        state.advance()?;
    }

    let eval = &run.data[&(run.plan.target, seed)].test;
    let (images, labels) = eval.images_and_labels()?;
    Ok(evaluate_accuracy(&model, &images, &labels)?)
}

/// Accuracies of one cell across seeds. NaN marks a diverged seed; diverged
/// seeds are excluded from the mean and spread but counted.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: String,
    pub sources: Vec<usize>,
    pub target: usize,
    pub per_seed: Vec<f64>,
}

impl CellOutcome {
    fn finite(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_seed.iter().copied().filter(|v| v.is_finite())
    }

    pub fn mean_accuracy(&self) -> f64 {
        let (n, sum) = self.finite().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    /// Population standard deviation over the seeds that finished.
    pub fn stddev(&self) -> f64 {
        let mean = self.mean_accuracy();
        if !mean.is_finite() {
            return f64::NAN;
        }
        let (n, ss) = self
            .finite()
            .fold((0usize, 0.0), |(n, s), v| (n + 1, s + (v - mean) * (v - mean)));
        (ss / n as f64).sqrt()
    }

    pub fn diverged(&self) -> usize {
        self.per_seed.iter().filter(|v| !v.is_finite()).count()
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub kind: RunKind,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub steps_per_cell: usize,
    pub cells: Vec<CellOutcome>,
}

fn fmt4(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "NaN".into()
    }
}

impl RunSummary {
    /// Mean of the per-cell mean accuracies, skipping cells with no finished
    /// seed.
    pub fn avg(&self) -> f64 {
        let means: Vec<f64> = self
            .cells
            .iter()
            .map(CellOutcome::mean_accuracy)
            .filter(|v| v.is_finite())
            .collect();
        if means.is_empty() {
            f64::NAN
        } else {
            means.iter().sum::<f64>() / means.len() as f64
        }
    }

    /// Worst per-cell mean accuracy.
    pub fn min(&self) -> f64 {
        self.cells
            .iter()
            .map(CellOutcome::mean_accuracy)
            .filter(|v| v.is_finite())
            .fold(f64::NAN, |acc, v| if acc.is_nan() || v < acc { v } else { acc })
    }

    pub fn diverged(&self) -> usize {
        self.cells.iter().map(CellOutcome::diverged).sum()
    }

    pub fn cell(&self, sources: &[usize], target: usize) -> Option<&CellOutcome> {
        self.cells
            .iter()
            .find(|c| c.sources == sources && c.target == target)
    }

    /// One-to-one lookup by source and target ids.
    pub fn pair(&self, source: usize, target: usize) -> Option<&CellOutcome> {
        self.cell(&[source], target)
    }

    /// Leave-one-out lookup by target id.
    pub fn target_cell(&self, target: usize) -> Option<&CellOutcome> {
        self.cells.iter().find(|c| c.target == target)
    }

    /// Aggregate table with trailing Avg, Min, and Diverged rows.
    pub fn results_csv(&self) -> String {
        let mut out = String::from("cell,target,method,mean_accuracy,stddev\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.cell,
                c.target,
                self.method.name(),
                fmt4(c.mean_accuracy()),
                fmt4(c.stddev())
            );
        }
        let _ = writeln!(out, "Avg,,{},{},", self.method.name(), fmt4(self.avg()));
        let _ = writeln!(out, "Min,,{},{},", self.method.name(), fmt4(self.min()));
        let _ = writeln!(out, "Diverged,,{},{},", self.method.name(), self.diverged());
        out
    }

    /// Per-seed detail table.
    pub fn seeds_csv(&self) -> String {
        let mut out = String::from("cell,target,method,seed,accuracy\n");
        for c in &self.cells {
            for (&seed, &acc) in self.seeds.iter().zip(&c.per_seed) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    c.cell,
                    c.target,
                    self.method.name(),
                    seed,
                    fmt4(acc)
                );
            }
        }
        out
    }

    pub fn manifest_toml(&self, cfg: &ExperimentConfig) -> Result<String, HarnessError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            run: &'static str,
            method: &'a str,
            config_sha256: String,
            seeds: &'a [u64],
            cells: usize,
            steps_per_cell: usize,
            diverged: usize,
            lambda_schedule: &'static str,
            lr_schedule: &'static str,
            pca_covariance_divisor: &'static str,
        }
        let manifest = Manifest {
            run: self.kind.label(),
            method: self.method.name(),
            config_sha256: cfg.sha256(),
            seeds: &self.seeds,
            cells: self.cells.len(),
            steps_per_cell: self.steps_per_cell,
            diverged: self.diverged(),
            lambda_schedule: "lambda(p) = 2 / (1 + exp(-10 p)) - 1",
            lr_schedule: "mu(p) = mu0 / (1 + 10 p)^0.75",
            pca_covariance_divisor: "n-1",
        };
        toml::to_string(&manifest).map_err(|e| HarnessError::Serialize(e.to_string()))
    }
}

/// Trains every ordered source/target pair.
pub fn run_one_to_one(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    run_sweep(cfg, RunKind::OneToOne)
}

/// Trains one cell per target on all remaining domains.
pub fn run_leave_one_out(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    run_sweep(cfg, RunKind::LeaveOneOut)
}

fn run_sweep(cfg: &ExperimentConfig, kind: RunKind) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let world = make_world(&cfg.world_config())?;
    let mut ids: Vec<usize> = world.domains.iter().map(|d| d.id).collect();
    ids.sort_unstable();
    if ids.len() < 2 {
        return Err(HarnessError::Config(
            "a sweep needs at least two domains".into(),
        ));
    }
    let data = build_datasets(&world, cfg)?;
    let assignment = cell_assignment(cfg, &world)?;

    let plans: Vec<CellPlan> = match kind {
        RunKind::OneToOne => {
            let mut plans = Vec::new();
            for &target in &ids {
                for &source in &ids {
                    if source != target {
                        plans.push(CellPlan {
                            name: format!("{source}->{target}"),
                            sources: vec![source],
                            target,
                        });
                    }
                }
            }
            plans
        }
        RunKind::LeaveOneOut => ids
            .iter()
            .map(|&target| CellPlan {
                name: format!("rest->{target}"),
                sources: ids.iter().copied().filter(|&s| s != target).collect(),
                target,
            })
            .collect(),
    };

    let n_supervised = plans[0].sources.len() * cfg.world.n_per_class * cfg.world.num_classes;
    let steps_per_cell =
        cfg.experiment.epochs * n_supervised.div_ceil(cfg.experiment.batch_size);

    let jobs: Vec<(usize, usize)> = (0..plans.len())
        .flat_map(|c| (0..cfg.experiment.seeds.len()).map(move |s| (c, s)))
        .collect();
    let accuracies: Vec<((usize, usize), f64)> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let run = CellRun {
                cfg,
                plan: &plans[c],
                data: &data,
                assignment: assignment.as_ref(),
                kind,
            };
            run_cell(&run, cfg.experiment.seeds[s]).map(|a| ((c, s), a))
        })
        .collect::<Result<_, _>>()?;

    let mut per_cell = vec![vec![f64::NAN; cfg.experiment.seeds.len()]; plans.len()];
    for ((c, s), a) in accuracies {
        per_cell[c][s] = a;
    }
    let cells = plans
        .into_iter()
        .zip(per_cell)
        .map(|(plan, per_seed)| CellOutcome {
            cell: plan.name,
            sources: plan.sources,
            target: plan.target,
            per_seed,
        })
        .collect();
    Ok(RunSummary {
        kind,
        method: cfg.experiment.method,
        seeds: cfg.experiment.seeds.clone(),
        steps_per_cell,
        cells,
    })
}

/// Writes results.csv, seeds.csv, and manifest.toml into the configured
/// output directory. All three are byte-stable across reruns.
pub fn write_run(cfg: &ExperimentConfig, summary: &RunSummary) -> Result<(), HarnessError> {
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), summary.results_csv())?;
    std::fs::write(dir.join("seeds.csv"), summary.seeds_csv())?;
    std::fs::write(dir.join("manifest.toml"), summary.manifest_toml(cfg)?)?;
    Ok(())
}

/// Outcome of a gradient sweep over random architectures.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub nets: usize,
    pub worst: f64,
    /// Worst error reported when one parameter's gradient is doubled; a
    /// working checker must flag this far above the clean threshold.
    pub sentinel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst < 1e-4 && self.sentinel_error >= 0.333
    }
}

fn random_check_net(rng: &mut ChaCha8Rng) -> Result<(Network, Tensor), HarnessError> {
    let classes = rng.random_range(2..5usize);
    let batch = rng.random_range(2..4usize);
    let variant = rng.random_range(0..3u8);
    let (specs, shape) = match variant {
        0 => {
            let n_in = rng.random_range(4..9usize);
            let hidden = rng.random_range(3..7usize);
            (
                vec![
                    LayerSpec::Dense { units: hidden },
                    LayerSpec::Relu,
                    LayerSpec::Dense { units: classes },
                ],
                vec![n_in],
            )
        }
        1 => {
            let s = rng.random_range(6..9usize);
            let filters = rng.random_range(1..4usize);
            let channels = rng.random_range(1..3usize);
            (
                vec![
                    LayerSpec::Conv2d {
                        filters,
                        kernel: (3, 3),
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2x2,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: classes },
                ],
                vec![s, s, channels],
            )
        }
        _ => {
            let s = rng.random_range(8..11usize);
            let hidden = rng.random_range(4..7usize);
            (
                vec![
                    LayerSpec::Conv2d {
                        filters: 2,
                        kernel: (3, 3),
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2x2,
                    LayerSpec::Conv2d {
                        filters: 3,
                        kernel: (2, 2),
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: hidden },
                    LayerSpec::Relu,
                    LayerSpec::Dense { units: classes },
                ],
                vec![s, s, 1],
            )
        }
    };
    let net = Network::build(specs, &shape, rng)?;
    let per_row: usize = shape.iter().product();
    let values: Vec<f64> = (0..batch * per_row)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut full_shape = vec![batch];
    full_shape.extend(&shape);
    Ok((net, Tensor::new(full_shape, values)?))
}

/// Checks analytic gradients of `nets` random networks against central
/// finite differences, then confirms the checker flags a doubled gradient.
pub fn run_grad_check(nets: usize, seed: u64) -> Result<GradCheckReport, HarnessError> {
    if nets == 0 {
        return Err(HarnessError::Config("need at least one net".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..nets {
        let (mut net, input) = random_check_net(&mut rng)?;
        worst = worst.max(grad_check(&mut net, &input, 1e-5)?);
    }
    let (mut net, input) = random_check_net(&mut rng)?;
    let sentinel_error = grad_check_with(&mut net, &input, 1e-5, |params| {
        if let Some(p) = params.iter_mut().next() {
            for g in p.tensor.grad_mut() {
                *g *= 2.0;
            }
        }
    })?;
    Ok(GradCheckReport {
        nets,
        worst,
        sentinel_error,
    })
}

/// Recomputed marginals of an accuracy table.
#[derive(Debug, Clone)]
pub struct FixtureReport {
    pub num_domains: usize,
    pub source_10_row_avg: f64,
    pub target_1_col_max: f64,
    pub min_cell: (usize, usize, f64),
}

impl FixtureReport {
    /// Checks the reference marginals of the shipped table: source 10
    /// averages 0.69 over its targets, target 1 peaks at 0.83, and the
    /// global minimum is 0.30 at source 9, target 6.
    pub fn passed(&self) -> bool {
        (self.source_10_row_avg - 0.69).abs() <= 0.005
            && (self.target_1_col_max - 0.83).abs() <= 0.005
            && self.min_cell.0 == 9
            && self.min_cell.1 == 6
            && (self.min_cell.2 - 0.30).abs() <= 0.005
    }
}

pub fn verify_fixture(path: Option<&Path>) -> Result<FixtureReport, HarnessError> {
    let default = shipped_fixture_path();
    let fixture = load_accuracy_fixture(path.unwrap_or(&default))?;
    let needs = |what: &str| {
        HarnessError::Config(format!(
            "table covers {} domains; verifying reference marginals needs {what}",
            fixture.num_domains()
        ))
    };
    let source_10_row_avg = fixture.row_avg(10).ok_or_else(|| needs("source 10"))?;
    let target_1_col_max = fixture.col_max(1).ok_or_else(|| needs("target 1"))?;
    Ok(FixtureReport {
        num_domains: fixture.num_domains(),
        source_10_row_avg,
        target_1_col_max,
        min_cell: fixture.min_cell(),
    })
}

/// A PCA pass over an accuracy table.
#[derive(Debug, Clone)]
pub struct PcaRun {
    pub matrix: TransferMatrix,
    pub full: PcaResult,
    /// Leading components kept for reporting.
    pub summary: PcaResult,
    /// Sign split of the first component, if no activation sits at zero.
    pub grouping: Option<FactorAssignment>,
}

pub fn run_pca(path: &Path, fill: f64, components: usize) -> Result<PcaRun, HarnessError> {
    let fixture = load_accuracy_fixture(path)?;
    let matrix = TransferMatrix::from_fixture(&fixture).fill_diagonal(fill)?;
    let full = pca(&matrix)?;
    let summary = full.truncated(components)?;
    let grouping = sign_grouping("pc1_sign", full.activations(0)).ok();
    Ok(PcaRun {
        matrix,
        full,
        summary,
        grouping,
    })
}

/// Writes matrix.csv and pca.csv into `dir`.
pub fn write_pca(dir: &Path, run: &PcaRun) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("matrix.csv"), run.matrix.to_csv())?;
    std::fs::write(dir.join("pca.csv"), run.summary.to_csv())?;
    Ok(())
}
