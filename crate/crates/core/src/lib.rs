//! Closed-loop adaptive cruise control from stereo appearance features.
//!
//! The pipeline: an ensemble of heteroscedastic regressors turns synthetic
//! stereo observations into a fused headway estimate with calibrated
//! variance ([`perception`]); two consecutive estimates seed a Gaussian
//! belief that is pushed through constant-acceleration kinematics
//! ([`propagation`]); a stochastic model-predictive controller tightens its
//! safety constraints by the belief's quantiles and solves the resulting
//! quadratic program with an in-crate operator-splitting solver ([`smpc`]);
//! a car-following simulator closes the loop and scores runs ([`harness`]).

pub mod harness;
pub mod kinematics;
pub mod perception;
pub mod propagation;
pub mod smpc;
