//! Longitudinal vehicle motion: exact constant-acceleration steps with speed
//! saturation, lead-speed playback from sampled traces, and bumper-to-bumper
//! headway between two vehicles.

use thiserror::Error;

/// Lower speed saturation shared by every vehicle in the stack (m/s).
pub const V_MIN: f64 = 0.0;
/// Upper speed saturation shared by every vehicle in the stack (m/s).
pub const V_MAX: f64 = 34.0;
/// Largest acceleration magnitude any vehicle realizes (m/s^2).
pub const A_LIMIT: f64 = 6.0;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("{what} must be finite, got {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("query time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("speed {value} m/s at sample {index} is outside [{lo}, {hi}] m/s", lo = V_MIN, hi = V_MAX)]
    SpeedOutOfRange { index: usize, value: f64 },
    #[error("speed trajectory needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("vehicle length must be positive and finite, got {0}")]
    BadLength(f64),
}

/// Longitudinal state of one vehicle: center position (m) and speed (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub v: f64,
}

/// Commanded longitudinal acceleration (m/s^2), held constant over a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub a: f64,
}

/// Physical footprint of a vehicle, reduced to its length (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleGeometry {
    length: f64,
}

impl VehicleGeometry {
    pub fn new(length: f64) -> Result<Self, KinematicsError> {
        if !length.is_finite() || length <= 0.0 {
            return Err(KinematicsError::BadLength(length));
        }
        Ok(Self { length })
    }

    pub fn length(&self) -> f64 {
        self.length
    }
}

/// Uniformly sampled speed trace for the lead vehicle.
///
/// Queries interpolate linearly between samples and extrapolate the final
/// sample as a constant. Every sample must lie in `[V_MIN, V_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTrajectory {
    sample_dt: f64,
    speeds: Vec<f64>,
}

impl SpeedTrajectory {
    pub fn new(sample_dt: f64, speeds: Vec<f64>) -> Result<Self, KinematicsError> {
        if !sample_dt.is_finite() || sample_dt <= 0.0 {
            return Err(KinematicsError::BadTimeStep(sample_dt));
        }
        if speeds.len() < 2 {
            return Err(KinematicsError::TooFewSamples(speeds.len()));
        }
        for (index, &value) in speeds.iter().enumerate() {
            if !value.is_finite() || !(V_MIN..=V_MAX).contains(&value) {
                return Err(KinematicsError::SpeedOutOfRange { index, value });
            }
        }
        Ok(Self { sample_dt, speeds })
    }

    pub fn sample_dt(&self) -> f64 {
        self.sample_dt
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    /// Time spanned by the samples: (len - 1) * sample_dt.
    pub fn duration(&self) -> f64 {
        (self.speeds.len() - 1) as f64 * self.sample_dt
    }

    /// Speed at time `t`: linear interpolation inside the trace, constant
    /// extrapolation of the last sample beyond it.
    pub fn speed_at(&self, t: f64) -> Result<f64, KinematicsError> {
        if !t.is_finite() || t < 0.0 {
            return Err(KinematicsError::NegativeTime(t));
        }
        let s = t / self.sample_dt;
        let i = s.floor() as usize;
        if i + 1 >= self.speeds.len() {
            return Ok(*self.speeds.last().expect("len >= 2"));
        }
        let frac = s - i as f64;
        Ok(self.speeds[i] + frac * (self.speeds[i + 1] - self.speeds[i]))
    }

    pub fn mean(&self) -> f64 {
        self.speeds.iter().sum::<f64>() / self.speeds.len() as f64
    }

    /// Population standard deviation of the samples.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .speeds
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / self.speeds.len() as f64;
        var.sqrt()
    }
}

fn check_finite(what: &'static str, value: f64) -> Result<(), KinematicsError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(KinematicsError::NonFinite { what, value })
    }
}

/// Advance one vehicle by `dt` under constant commanded acceleration.
///
/// Integration is exact: if the speed hits a saturation bound mid-step the
/// crossing time is solved in closed form and the remainder of the step runs
/// at the bound, so splitting a step in two reproduces the full step up to
/// rounding. The incoming speed must already lie inside `[V_MIN, V_MAX]`.
pub fn step_kinematics(
    state: VehicleState,
    u: ControlInput,
    dt: f64,
) -> Result<VehicleState, KinematicsError> {
    check_finite("position", state.x)?;
    check_finite("speed", state.v)?;
    check_finite("acceleration", u.a)?;
    if !dt.is_finite() || dt <= 0.0 {
        return Err(KinematicsError::BadTimeStep(dt));
    }
    if !(V_MIN..=V_MAX).contains(&state.v) {
        return Err(KinematicsError::SpeedOutOfRange { index: 0, value: state.v });
    }

    let VehicleState { x, v } = state;
    let a = u.a;
    if a == 0.0 {
        return Ok(VehicleState { x: x + v * dt, v });
    }
    let v_free = v + a * dt;
    if (V_MIN..=V_MAX).contains(&v_free) {
        return Ok(VehicleState {
            x: x + v * dt + 0.5 * a * dt * dt,
            v: v_free,
        });
    }
    let bound = if a > 0.0 { V_MAX } else { V_MIN };
    if v == bound {
        // Already pinned at the bound the command pushes toward.
        return Ok(VehicleState { x: x + bound * dt, v: bound });
    }
    let t_hit = (bound - v) / a;
    let x_hit = x + v * t_hit + 0.5 * a * t_hit * t_hit;
    Ok(VehicleState {
        x: x_hit + bound * (dt - t_hit),
        v: bound,
    })
}

/// Bumper-to-bumper headway: rear bumper of the lead minus front bumper of
/// the ego. Negative values mean the bodies overlap (collision).
pub fn bumper_headway(
    lead: VehicleState,
    ego: VehicleState,
    lead_geom: VehicleGeometry,
    ego_geom: VehicleGeometry,
) -> f64 {
    (lead.x - 0.5 * lead_geom.length()) - (ego.x + 0.5 * ego_geom.length())
}
