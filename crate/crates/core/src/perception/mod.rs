//! Headway perception: a synthetic stereo feature sensor, heteroscedastic
//! two-layer regressors trained on it, and the deep-ensemble fusion that
//! turns member predictions into one mean/variance estimate.

mod ensemble;
mod regressor;
mod sensor;
mod training;

pub use ensemble::{
    build_ensemble, ensemble_estimate, load_ensemble, member_seed, save_ensemble, EnsemblePlan,
};
pub use regressor::{
    nll_gradient, nll_loss, regressor_forward, RegressorGradient, RegressorParams,
    VARIANCE_EPSILON,
};
pub use sensor::{synth_observe, ObservationPair, SensorModel};
pub use training::{
    train_regressor, train_regressor_detailed, TrainConfig, TrainReport, TrainingSet,
};

use std::path::PathBuf;
use thiserror::Error;

/// Fused or single-member headway estimate: mean (m) and variance (m^2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadwayEstimate {
    pub p: f64,
    pub var: f64,
}

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("{what} must be finite, got {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("observation has {got} features per camera, expected {want}")]
    FeatureMismatch { got: usize, want: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("target {value} m at row {index} is outside [{lo}, {hi}] m")]
    TargetOutOfRange { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: validation loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid sensor model: {0}")]
    InvalidSensor(String),
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("ensemble needs at least {min} members, got {got}")]
    TooFewMembers { got: usize, min: usize },
    #[error("model file {path}: {msg}")]
    ModelFile { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
