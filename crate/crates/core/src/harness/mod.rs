//! Closed-loop car-following harness: scenario configuration, the
//! frame-stepped simulator that wires perception, belief propagation, and the
//! controller together, per-frame records with their CSV form, safety
//! metrics, and multi-scenario batches.

mod batch;
mod metrics;
mod records;
mod scenario;
mod trajectory;

pub use batch::{batch_run, run_seed, BatchRow, BatchSummary};
pub use metrics::{
    compute_metrics, jerk_series, time_to_collision, time_to_safety, Histogram, MetricsParams,
    MetricsReport,
};
pub use records::{read_records, write_records, StepRecord};
pub use scenario::{
    lead_trajectories, load_config, run_scenario, run_with, LeadSpec, RunResult, ScenarioConfig,
    SetSpeed, SyntheticLead,
};
pub use trajectory::{
    filter_trajectories, generate_lead_trajectory, load_trajectories, DEFAULT_MIN_SPEED_STD,
};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Csv { path: PathBuf, line: usize, msg: String },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("{path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("no trajectory passes the speed-variation filter (std > {threshold} m/s)")]
    EmptyAfterFilter { threshold: f64 },
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
    #[error(transparent)]
    Perception(#[from] crate::perception::PerceptionError),
    #[error(transparent)]
    Propagation(#[from] crate::propagation::PropagationError),
    #[error(transparent)]
    Smpc(#[from] crate::smpc::SmpcError),
}
