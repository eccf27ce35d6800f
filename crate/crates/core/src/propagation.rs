//! Gaussian belief over headway and closing speed pushed through the
//! controller's constant-acceleration prediction model.
//!
//! Two consecutive fused estimates seed the belief: the newer one is the
//! current headway, their finite difference (corrected for the acceleration
//! applied between them) is the closing speed. Mean recursions are affine in
//! the planned ego accelerations; variance recursions do not depend on them
//! at all, because each future estimate is modeled as a fresh measurement
//! whose error comes from the same two-sample differencing scheme.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PropagationError {
    #[error("{what} must be finite, got {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("variance must be positive and finite, got {0}")]
    BadVariance(f64),
    #[error("estimate spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("prediction horizon must be at least 1 step")]
    EmptyHorizon,
}

/// Two consecutive fused headway estimates plus the ego acceleration held
/// between them — everything the predictor needs to seed a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefState {
    /// Older fused headway mean (m), taken `dt` seconds before `p_now`.
    pub p_prev: f64,
    /// Variance of the older estimate (m^2).
    pub var_prev: f64,
    /// Newest fused headway mean (m).
    pub p_now: f64,
    /// Variance of the newest estimate (m^2).
    pub var_now: f64,
    /// Ego acceleration held over the gap between the two estimates (m/s^2).
    pub a_between: f64,
    /// Spacing between the two estimates (s); also the prediction step.
    pub dt: f64,
}

impl BeliefState {
    pub fn new(
        p_prev: f64,
        var_prev: f64,
        p_now: f64,
        var_now: f64,
        a_between: f64,
        dt: f64,
    ) -> Result<Self, PropagationError> {
        for (what, value) in [
            ("previous headway mean", p_prev),
            ("current headway mean", p_now),
            ("held acceleration", a_between),
        ] {
            if !value.is_finite() {
                return Err(PropagationError::NonFinite { what, value });
            }
        }
        for var in [var_prev, var_now] {
            if !var.is_finite() || var <= 0.0 {
                return Err(PropagationError::BadVariance(var));
            }
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(PropagationError::BadSpacing(dt));
        }
        Ok(Self { p_prev, var_prev, p_now, var_now, a_between, dt })
    }

    /// Belief with zero-variance estimates, for deterministic tooling and
    /// tests; regular construction requires strictly positive variances.
    pub fn degenerate(p_prev: f64, p_now: f64, a_between: f64, dt: f64) -> Self {
        Self { p_prev, var_prev: 0.0, p_now, var_now: 0.0, a_between, dt }
    }
}

/// Predicted headway / closing-speed means and variances over a horizon.
///
/// Index `i` is "i steps ahead": entry 0 is the seeded current belief, so all
/// four vectors have `horizon + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMoments {
    pub p: Vec<f64>,
    pub p_rel: Vec<f64>,
    pub var: Vec<f64>,
    pub var_rel: Vec<f64>,
}

/// Closing-speed mean and variance implied by differencing the two estimates.
///
/// The mean removes the distance accumulated by the held acceleration over
/// the differencing window; the variance is the two estimate variances summed
/// and scaled by `1/dt^2`.
pub fn bootstrap_relative_speed(belief: &BeliefState) -> (f64, f64) {
    let p_rel = (belief.p_now - belief.p_prev) / belief.dt - 0.5 * belief.a_between * belief.dt;
    let var_rel = (belief.var_now + belief.var_prev) / (belief.dt * belief.dt);
    (p_rel, var_rel)
}

/// Variance recursions over `horizon` steps, independent of any planned
/// accelerations. Returns `(var, var_rel)`, each of length `horizon + 1` with
/// the seeds at index 0.
///
/// Each step the headway picks up the closing-speed variance scaled by
/// `dt^2`, and the next differenced closing speed picks up twice the headway
/// variance scaled by `1/dt^2`:
///   var[i+1]     = var[i] + dt^2 * var_rel[i]
///   var_rel[i+1] = (2 / dt^2) * var[i] + var_rel[i]
pub fn propagate_variances(
    var0: f64,
    var_rel0: f64,
    dt: f64,
    horizon: usize,
) -> Result<(Vec<f64>, Vec<f64>), PropagationError> {
    if !var0.is_finite() || var0 < 0.0 {
        return Err(PropagationError::BadVariance(var0));
    }
    if !var_rel0.is_finite() || var_rel0 < 0.0 {
        return Err(PropagationError::BadVariance(var_rel0));
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(PropagationError::BadSpacing(dt));
    }
    if horizon == 0 {
        return Err(PropagationError::EmptyHorizon);
    }
    let mut var = Vec::with_capacity(horizon + 1);
    let mut var_rel = Vec::with_capacity(horizon + 1);
    var.push(var0);
    var_rel.push(var_rel0);
    for i in 0..horizon {
        var.push(var[i] + dt * dt * var_rel[i]);
        var_rel.push(2.0 / (dt * dt) * var[i] + var_rel[i]);
    }
    Ok((var, var_rel))
}

/// Mean recursions under the planned ego accelerations and a constant-speed
/// lead. Returns `(p, p_rel)`, each of length `accels.len() + 1` with the
/// seeds at index 0:
///   p[i+1]     = p[i] + dt * p_rel[i] - dt^2/2 * a[i]
///   p_rel[i+1] = p_rel[i] - dt * a[i]
pub fn propagate_means(
    p0: f64,
    p_rel0: f64,
    accels: &[f64],
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>), PropagationError> {
    for (what, value) in [("initial headway mean", p0), ("initial closing-speed mean", p_rel0)] {
        if !value.is_finite() {
            return Err(PropagationError::NonFinite { what, value });
        }
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(PropagationError::BadSpacing(dt));
    }
    if accels.is_empty() {
        return Err(PropagationError::EmptyHorizon);
    }
    if let Some(&value) = accels.iter().find(|a| !a.is_finite()) {
        return Err(PropagationError::NonFinite { what: "planned acceleration", value });
    }
    let mut p = Vec::with_capacity(accels.len() + 1);
    let mut p_rel = Vec::with_capacity(accels.len() + 1);
    p.push(p0);
    p_rel.push(p_rel0);
    for (i, &a) in accels.iter().enumerate() {
        p.push(p[i] + dt * p_rel[i] - 0.5 * dt * dt * a);
        p_rel.push(p_rel[i] - dt * a);
    }
    Ok((p, p_rel))
}

/// Full moment rollout: bootstrap the closing speed from the belief, then run
/// the mean and variance recursions for `accels.len()` steps.
pub fn predict(belief: &BeliefState, accels: &[f64]) -> Result<PredictedMoments, PropagationError> {
    let (p_rel0, var_rel0) = bootstrap_relative_speed(belief);
    let (p, p_rel) = propagate_means(belief.p_now, p_rel0, accels, belief.dt)?;
    let (var, var_rel) = propagate_variances(belief.var_now, var_rel0, belief.dt, accels.len())?;
    Ok(PredictedMoments { p, p_rel, var, var_rel })
}
