//! Inverse error function and the Gaussian chance-constraint margin built
//! from it.

use super::SmpcError;
use std::f64::consts::PI;

/// Inverse of the error function on (-1, 1).
///
/// A Winitzki-style closed-form seed (relative error ~1e-4 everywhere on the
/// open interval) is refined by three Newton steps on `erf(x) - y`, which is
/// enough to reach |erf(x) - y| at rounding level; near |y| -> 1 the erf
/// derivative underflows and iteration stops, leaving the seed-plus-partial
/// polish, which is already at the representable limit there.
pub fn inverse_erf(y: f64) -> Result<f64, SmpcError> {
    if !y.is_finite() || y.abs() >= 1.0 {
        return Err(SmpcError::InverseErfDomain(y));
    }
    if y == 0.0 {
        return Ok(0.0);
    }

    // Winitzki 2008 approximation with a = 0.147.
    let a = 0.147;
    let ln_term = (1.0 - y * y).ln();
    let c = 2.0 / (PI * a) + 0.5 * ln_term;
    let mut x = y.signum() * ((c * c - ln_term / a).sqrt() - c).sqrt();

    for _ in 0..3 {
        let deriv = 2.0 / PI.sqrt() * (-x * x).exp();
        if deriv == 0.0 {
            break;
        }
        x -= (libm::erf(x) - y) / deriv;
    }
    Ok(x)
}

/// Distance a Gaussian chance constraint must be tightened by so that the
/// constrained quantity stays feasible with probability `1 - eps`:
/// `sqrt(2 * var) * inverse_erf(1 - 2 * eps)`.
///
/// Negative for `eps > 0.5` (the constraint is relaxed); zero variance gives
/// a zero margin for any admissible risk level.
pub fn tightening_margin(var: f64, eps: f64) -> Result<f64, SmpcError> {
    if !var.is_finite() || var < 0.0 {
        return Err(SmpcError::VarianceDomain(var));
    }
    if !eps.is_finite() || eps <= 0.0 || eps >= 1.0 {
        return Err(SmpcError::EpsilonDomain(eps));
    }
    Ok((2.0 * var).sqrt() * inverse_erf(1.0 - 2.0 * eps)?)
}
