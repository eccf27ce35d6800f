//! Scenario configuration and the closed-loop frame simulator.
//!
//! One scenario steps lead and ego vehicles on a fixed frame clock. The lead
//! plays back a speed trace; the ego integrates a zero-order-hold command.
//! On the estimate clock a synthetic stereo observation of the true headway
//! is fused by the ensemble; on the replan clock the controller pairs the
//! newest estimate with the one exactly one prediction step older and emits
//! a new command. Everything is a pure function of (config, seed).

use super::batch::run_seed;
use super::metrics::{compute_metrics, MetricsParams, MetricsReport};
use super::records::StepRecord;
use super::trajectory::{generate_lead_trajectory, load_trajectories};
use super::HarnessError;
use crate::kinematics::{
    bumper_headway, step_kinematics, ControlInput, SpeedTrajectory, VehicleGeometry,
    VehicleState, A_LIMIT, V_MAX, V_MIN,
};
use crate::perception::{
    ensemble_estimate, load_ensemble, synth_observe, RegressorParams, SensorModel,
};
use crate::propagation::BeliefState;
use crate::smpc::{mpc_step_with, MpcConfig, QpProblem, QpSolution, SmpcError, SolverSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{Deserializer, Unexpected, Visitor};
use serde::Deserialize;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

/// Target speed selection: a fixed value, or the mean of the lead trace.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SetSpeed {
    #[default]
    AutoMean,
    Fixed(f64),
}

impl<'de> Deserialize<'de> for SetSpeed {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct SetSpeedVisitor;
        impl Visitor<'_> for SetSpeedVisitor {
            type Value = SetSpeed;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a speed in m/s or the string \"auto-mean\"")
            }

            fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<SetSpeed, E> {
                Ok(SetSpeed::Fixed(v))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<SetSpeed, E> {
                Ok(SetSpeed::Fixed(v as f64))
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<SetSpeed, E> {
                Ok(SetSpeed::Fixed(v as f64))
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<SetSpeed, E> {
                if v == "auto-mean" {
                    Ok(SetSpeed::AutoMean)
                } else {
                    Err(E::invalid_value(Unexpected::Str(v), &self))
                }
            }
        }
        deserializer.deserialize_any(SetSpeedVisitor)
    }
}

/// Lead trace played back from a CSV file (or a directory of them).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileLead {
    pub file: PathBuf,
}

/// Synthetic lead traces drawn from the two-sinusoid generator.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLead {
    /// How many traces to generate (1 for `simulate`, many for `batch`).
    pub count: usize,
    /// Trace length in seconds; defaults to the scenario duration.
    #[serde(default)]
    pub duration: Option<f64>,
    /// Sampling period of the generated trace (s).
    #[serde(default = "default_sample_dt")]
    pub sample_dt: f64,
    /// Generator seed; defaults to the scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_sample_dt() -> f64 {
    0.1
}

/// Where lead speed traces come from: exactly one of a file source or the
/// synthetic generator.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LeadSpec {
    File(FileLead),
    Synthetic(SyntheticLead),
}

impl Default for LeadSpec {
    fn default() -> Self {
        LeadSpec::Synthetic(SyntheticLead {
            count: 1,
            duration: None,
            sample_dt: default_sample_dt(),
            seed: None,
        })
    }
}

/// Everything one closed-loop run needs. Loadable from a TOML file whose
/// keys mirror the field names; nested sections configure the controller,
/// the sensor, and the lead source.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Seed of the run's observation noise (and, by default, of the
    /// synthetic lead generator).
    pub seed: u64,
    /// Simulated time (s).
    pub duration: f64,
    /// Frame rate (Hz).
    pub sim_rate: f64,
    /// Command recomputation period (s); a whole number of frames.
    pub replan_period: f64,
    /// Period between fused estimates (s); must evenly divide the
    /// controller's prediction step, and be a whole number of frames.
    pub estimate_spacing: f64,
    /// True bumper-to-bumper headway at t = 0 (m).
    pub initial_headway: f64,
    /// Lead speed minus ego speed at t = 0 (m/s); positive starts the ego
    /// slower than the lead.
    pub initial_speed_diff: f64,
    /// Target speed; `auto-mean` tracks the lead trace's average. Overrides
    /// the controller section's set speed.
    pub set_speed: SetSpeed,
    /// Observe through the sensor's out-of-distribution distortion.
    pub ood: bool,
    /// Ensemble manifest produced by training.
    pub ensemble: PathBuf,
    pub lead_length: f64,
    pub ego_length: f64,
    pub lead: LeadSpec,
    pub mpc: MpcConfig,
    pub sensor: SensorModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            duration: 40.0,
            sim_rate: 100.0,
            replan_period: 0.5,
            estimate_spacing: 0.5,
            initial_headway: 5.0,
            initial_speed_diff: 5.0,
            set_speed: SetSpeed::AutoMean,
            ood: false,
            ensemble: PathBuf::from("ensemble/manifest.json"),
            lead_length: 5.0,
            ego_length: 5.0,
            lead: LeadSpec::default(),
            mpc: MpcConfig::default(),
            sensor: SensorModel::default(),
        }
    }
}

impl ScenarioConfig {
    /// Frames per period, requiring an exact whole number of frames.
    fn frames_per(&self, what: &str, period: f64) -> Result<usize, HarnessError> {
        let frames = period * self.sim_rate;
        if !frames.is_finite() || frames < 1.0 || (frames - frames.round()).abs() > 1e-6 {
            return Err(HarnessError::InvalidScenario(format!(
                "{what} of {period} s is not a whole number of frames at {} Hz",
                self.sim_rate
            )));
        }
        Ok(frames.round() as usize)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::InvalidScenario(msg));
        if !self.duration.is_finite() || self.duration <= 0.0 {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !self.sim_rate.is_finite() || self.sim_rate <= 0.0 {
            return bad(format!("sim_rate must be positive, got {}", self.sim_rate));
        }
        if self.sim_rate * self.replan_period < 1.0 {
            return bad(format!(
                "sim_rate {} Hz cannot resolve the {} s replan period",
                self.sim_rate, self.replan_period
            ));
        }
        self.frames_per("replan_period", self.replan_period)?;
        self.frames_per("estimate_spacing", self.estimate_spacing)?;
        let per_step = self.mpc.dt / self.estimate_spacing;
        if per_step < 1.0 - 1e-9 || (per_step - per_step.round()).abs() > 1e-9 {
            return bad(format!(
                "estimate_spacing {} s must evenly divide the controller's prediction step \
                 {} s: the belief bootstrap pairs estimates exactly one step apart",
                self.estimate_spacing, self.mpc.dt
            ));
        }
        if !self.initial_headway.is_finite() || self.initial_headway <= 0.0 {
            return bad(format!("initial_headway must be positive, got {}", self.initial_headway));
        }
        if !self.initial_speed_diff.is_finite() {
            return bad(format!("initial_speed_diff must be finite, got {}", self.initial_speed_diff));
        }
        if let SetSpeed::Fixed(v) = self.set_speed {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("set_speed must be non-negative, got {v}"));
            }
        }
        for (name, len) in [("lead_length", self.lead_length), ("ego_length", self.ego_length)] {
            if !len.is_finite() || len <= 0.0 {
                return bad(format!("{name} must be positive, got {len}"));
            }
        }
        if let LeadSpec::Synthetic(s) = &self.lead {
            if s.count == 0 {
                return bad("synthetic lead count must be at least 1".into());
            }
            if !s.sample_dt.is_finite() || s.sample_dt <= 0.0 {
                return bad(format!("synthetic sample_dt must be positive, got {}", s.sample_dt));
            }
            if let Some(d) = s.duration {
                if !d.is_finite() || d <= 0.0 {
                    return bad(format!("synthetic duration must be positive, got {d}"));
                }
            }
        }
        self.mpc.validate().map_err(HarnessError::from)?;
        self.sensor.validate().map_err(HarnessError::from)?;
        Ok(())
    }
}

/// Load and validate a scenario file. Relative paths inside it (the ensemble
/// manifest, a lead trace file) resolve against the file's directory.
pub fn load_config(path: &Path) -> Result<ScenarioConfig, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    let mut cfg: ScenarioConfig = toml::from_str(&text).map_err(|e| HarnessError::Config {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    if cfg.ensemble.is_relative() {
        cfg.ensemble = base.join(&cfg.ensemble);
    }
    if let LeadSpec::File(f) = &mut cfg.lead {
        if f.file.is_relative() {
            f.file = base.join(&f.file);
        }
    }
    Ok(cfg)
}

/// Resolve the scenario's lead source into named speed traces.
pub fn lead_trajectories(
    cfg: &ScenarioConfig,
) -> Result<Vec<(String, SpeedTrajectory)>, HarnessError> {
    match &cfg.lead {
        LeadSpec::File(f) => load_trajectories(&f.file),
        LeadSpec::Synthetic(s) => {
            let base = s.seed.unwrap_or(cfg.seed);
            let duration = s.duration.unwrap_or(cfg.duration);
            Ok((0..s.count)
                .map(|i| {
                    let name = format!("synthetic_{i:03}");
                    (name, generate_lead_trajectory(run_seed(base, i), duration, s.sample_dt))
                })
                .collect())
        }
    }
}

/// Outcome of one closed-loop run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<StepRecord>,
    pub metrics: MetricsReport,
    /// Set speed the run actually tracked (resolved from `auto-mean`).
    pub v_s: f64,
    /// Solves that fell back to the degraded braking command.
    pub fallback_count: usize,
    /// Frames on which the lead trace demanded more acceleration than the
    /// vehicle limit and was clipped.
    pub lead_clip_count: usize,
    /// A module error that stopped the run early; the records up to that
    /// point are preserved and summarized.
    pub aborted: Option<String>,
}

/// Run one scenario end to end: resolves a single lead trace and the
/// ensemble from the config, then delegates to [`run_with`].
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let mut traces = lead_trajectories(cfg)?;
    if traces.len() != 1 {
        return Err(HarnessError::InvalidScenario(format!(
            "one run needs exactly one lead trajectory, got {}; use a batch for several",
            traces.len()
        )));
    }
    let (members, trained_sensor) = load_ensemble(&cfg.ensemble)?;
    if trained_sensor != cfg.sensor {
        // Estimates degrade silently when serving features come from a
        // different sensor than the training ones; surface the skew.
        log::warn!(
            "scenario sensor differs from the one the ensemble was trained on \
             (manifest {}); estimates may be biased",
            cfg.ensemble.display()
        );
    }
    let (_, trace) = traces.pop().expect("length checked");
    run_with(cfg, &trace, &members, None)
}

/// Run one scenario against an explicit lead trace and ensemble. `on_solve`
/// observes every transcribed QP and its solution in replan order (the hook
/// behind QP dump files).
pub fn run_with(
    cfg: &ScenarioConfig,
    lead_trace: &SpeedTrajectory,
    members: &[RegressorParams],
    mut on_solve: Option<&mut dyn FnMut(usize, &QpProblem, &QpSolution)>,
) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let h = 1.0 / cfg.sim_rate;
    let n_frames = (cfg.duration * cfg.sim_rate).round() as usize;
    let est_every = cfg.frames_per("estimate_spacing", cfg.estimate_spacing)?;
    let replan_every = cfg.frames_per("replan_period", cfg.replan_period)?;
    let lead_geom = VehicleGeometry::new(cfg.lead_length)?;
    let ego_geom = VehicleGeometry::new(cfg.ego_length)?;

    let v_s = match cfg.set_speed {
        SetSpeed::Fixed(v) => v,
        SetSpeed::AutoMean => lead_trace.mean(),
    };
    let mut mpc = cfg.mpc.clone();
    mpc.v_s = v_s;
    mpc.validate()?;
    let horizon = mpc.horizon;
    let settings = SolverSettings::default();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v_lead0 = lead_trace.speed_at(0.0)?;
    let mut lead = VehicleState {
        x: cfg.initial_headway + 0.5 * (cfg.lead_length + cfg.ego_length),
        v: v_lead0,
    };
    let mut ego = VehicleState {
        x: 0.0,
        v: (v_lead0 - cfg.initial_speed_diff).clamp(V_MIN, V_MAX),
    };

    let mut records: Vec<StepRecord> = Vec::with_capacity(n_frames + 2);
    // Rolling estimate buffer: (t, p, var, ego speed when estimated). Deep
    // enough that the newest entry always has a partner exactly one
    // prediction step older.
    let est_depth = (mpc.dt / cfg.estimate_spacing).round() as usize + 1;
    let mut est_buf: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(est_depth + 1);
    let mut held = 0.0; // zero-order-hold command, 0 until the first plan
    let mut a_prev = 0.0; // last applied command, anchor of the smoothness term
    let mut last_est = (f64::NAN, f64::NAN);
    let mut last_slacks = vec![f64::NAN; horizon];
    let mut fallback_count = 0;
    let mut lead_clip_count = 0;
    let mut solve_index = 0;
    let mut aborted = None;

    for frame in 0..=n_frames {
        let t = frame as f64 * h;

        if frame % est_every == 0 {
            let d = bumper_headway(lead, ego, lead_geom, ego_geom);
            let fused = synth_observe(&cfg.sensor, d, cfg.ood, &mut rng)
                .and_then(|obs| ensemble_estimate(members, &obs));
            match fused {
                Ok(est) => {
                    last_est = (est.p, est.var);
                    est_buf.push((t, est.p, est.var, ego.v));
                    if est_buf.len() > est_depth {
                        est_buf.remove(0);
                    }
                }
                Err(e) => {
                    aborted = Some(e.to_string());
                    break;
                }
            }
        }

        if frame % replan_every == 0 && est_buf.len() == est_depth {
            let (t_prev, p_prev, var_prev, v_ego_prev) = est_buf[0];
            let (t_now, p_now, var_now, v_ego_now) = est_buf[est_depth - 1];
            // Ego acceleration actually realized between the two estimate
            // instants; exact even across mid-window replans or speed clamps.
            let a_between = (v_ego_now - v_ego_prev) / (t_now - t_prev);
            let solved = BeliefState::new(p_prev, var_prev, p_now, var_now, a_between, mpc.dt)
                .map_err(SmpcError::from)
                .and_then(|belief| match &mut on_solve {
                    Some(cb) => {
                        let mut adapter =
                            |p: &QpProblem, s: &QpSolution| cb(solve_index, p, s);
                        mpc_step_with(&mpc, &belief, ego.v, a_prev, &settings, Some(&mut adapter))
                    }
                    None => mpc_step_with(&mpc, &belief, ego.v, a_prev, &settings, None),
                });
            solve_index += 1;
            match solved {
                Ok(sol) => {
                    held = sol.command;
                    a_prev = sol.command;
                    if sol.fallback {
                        fallback_count += 1;
                    } else {
                        last_slacks = sol.slacks;
                    }
                }
                Err(e) => {
                    aborted = Some(e.to_string());
                    break;
                }
            }
        }

        records.push(StepRecord {
            t,
            x_lead: lead.x,
            v_lead: lead.v,
            x_ego: ego.x,
            v_ego: ego.v,
            d_true: bumper_headway(lead, ego, lead_geom, ego_geom),
            p_est: last_est.0,
            var_est: last_est.1,
            a_cmd: held,
            slacks: last_slacks.clone(),
        });
        if frame == n_frames {
            break;
        }

        let target = match lead_trace.speed_at(t + h) {
            Ok(v) => v,
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        };
        let mut a_lead = (target - lead.v) / h;
        if a_lead.abs() > A_LIMIT {
            a_lead = a_lead.clamp(-A_LIMIT, A_LIMIT);
            lead_clip_count += 1;
        }
        let stepped = step_kinematics(lead, ControlInput { a: a_lead }, h)
            .and_then(|l| Ok((l, step_kinematics(ego, ControlInput { a: held }, h)?)));
        match stepped {
            Ok((l, e)) => {
                lead = l;
                ego = e;
            }
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        }
        let d = bumper_headway(lead, ego, lead_geom, ego_geom);
        if d <= 0.0 {
            // Capture the contact frame so the metrics see the collision.
            records.push(StepRecord {
                t: t + h,
                x_lead: lead.x,
                v_lead: lead.v,
                x_ego: ego.x,
                v_ego: ego.v,
                d_true: d,
                p_est: last_est.0,
                var_est: last_est.1,
                a_cmd: held,
                slacks: last_slacks.clone(),
            });
            break;
        }
    }

    if records.is_empty() {
        return Err(HarnessError::InvalidScenario(format!(
            "run aborted before its first frame: {}",
            aborted.unwrap_or_else(|| "no frames simulated".into())
        )));
    }
    if let Some(msg) = &aborted {
        log::warn!("run aborted at t = {} s: {msg}", records.last().expect("non-empty").t);
    }
    let params = MetricsParams {
        d_s: mpc.d_s,
        t_s: mpc.t_s,
        replan_period: cfg.replan_period,
        v_s,
    };
    let metrics = compute_metrics(&records, &params)?;
    Ok(RunResult { records, metrics, v_s, fallback_count, lead_clip_count, aborted })
}
