//! Chance-constrained stochastic MPC for headway regulation, transcribed to
//! a quadratic program and solved by an in-crate operator-splitting solver
//! with an active-set polish step.

mod erf;
mod mpc;
mod qp;
mod solver;

pub use erf::{inverse_erf, tightening_margin};
pub use mpc::{build_qp, mpc_step, mpc_step_with, safety_margins, MpcConfig, MpcSolution, FALLBACK_JERK};
pub use qp::{DecisionVar, KktResiduals, LinearRow, QpProblem, QpSolution, QpStatus, RowLabel};
pub use solver::{solve_qp, solve_qp_with, SolverSettings};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SmpcError {
    #[error("inverse_erf requires |y| < 1, got {0}")]
    InverseErfDomain(f64),
    #[error("risk level must lie in (0, 1), got {0}")]
    EpsilonDomain(f64),
    #[error("variance must be non-negative and finite, got {0}")]
    VarianceDomain(f64),
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed quadratic program: {0}")]
    MalformedProblem(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(&'static str),
    #[error("{what} must be finite, got {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error(transparent)]
    Propagation(#[from] crate::propagation::PropagationError),
}
