//! Experiment harness: configuration, sweep execution, artifacts, and
//! verification commands.
//!
//! A run is a set of cells. In a one-to-one sweep each cell trains on one
//! source domain and evaluates on one target; in a leave-one-out sweep each
//! cell trains on every domain but the target. Cells repeat over seeds, and
//! cell randomness is keyed by the cell and seed but never by the method, so
//! methods that consume randomness identically can be compared bit for bit.

pub mod cli;
pub mod config;
pub mod runner;

pub use config::{
    default_config, ArchSection, AssignmentSection, DomainSection, ExperimentConfig,
    ExperimentSection, Method, OutputSection, WorldSection,
};
pub use runner::{
    cell_seed, dataset_seed, run_grad_check, run_leave_one_out, run_one_to_one, run_pca,
    verify_fixture, write_pca, write_run, CellOutcome, FixtureReport, GradCheckReport, PcaRun,
    RunKind, RunSummary,
};

use thiserror::Error;

use crate::adversarial::AdaptError;
use crate::analysis::AnalysisError;
use crate::masking::MaskError;
use crate::nn::{CheckError, NetError, ScheduleError, TensorError};
use crate::world::{FixtureError, WorldError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    /// A verification command ran to completion and found a mismatch.
    #[error("{0}")]
    Failed(String),
    #[error("serialize: {0}")]
    Serialize(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
