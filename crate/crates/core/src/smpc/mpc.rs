//! Transcription of the chance-constrained headway-regulation problem into a
//! quadratic program, and the per-replan controller step around it.
//!
//! Decision vector (5N coordinates for horizon N):
//! accelerations a_0..a_{N-1}, speeds v_1..v_N, headway means p_1..p_N,
//! closing-speed means pdot_1..pdot_N, and safety slacks delta_1..delta_N.
//! Mean dynamics enter as equality rows, the probabilistic headway floor as
//! inequality rows tightened by the belief's quantile margins; variances do
//! not depend on the decisions, so they are folded into the margins up front.

use super::erf::tightening_margin;
use super::qp::{DecisionVar, LinearRow, QpProblem, QpSolution, QpStatus, RowLabel};
use super::solver::{solve_qp_with, SolverSettings};
use super::SmpcError;
use crate::propagation::{bootstrap_relative_speed, propagate_variances, BeliefState};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Jerk bound used by the degraded-mode command ramp (m/s^3).
pub const FALLBACK_JERK: f64 = 2.0;

/// Horizon, weights, limits, and risk schedule of the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Prediction steps N.
    pub horizon: usize,
    /// Prediction step length (s); must equal the estimate spacing.
    pub dt: f64,
    /// Standstill distance the headway must not fall below (m).
    pub d_s: f64,
    /// Time-headway term: the floor grows by `t_s * v` (s).
    pub t_s: f64,
    /// Weight on squared acceleration.
    pub r1: f64,
    /// Weight on squared acceleration increments (first one vs the previous
    /// applied command).
    pub r2: f64,
    /// Weight on squared deviation from the set speed.
    pub q1: f64,
    /// Weight on squared closing speed.
    pub q2: f64,
    /// Linear price per meter of safety-slack usage.
    pub slack_weight: f64,
    /// Per-step risk levels, one per horizon step, non-decreasing, in (0, 1).
    pub eps: Vec<f64>,
    /// Driver-set speed (m/s).
    pub v_s: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Allow eps > 0.5 to act as stated (margins go negative, relaxing the
    /// floor below its deterministic position). Off by default: effective
    /// risk is capped at 0.5.
    pub allow_negative_margin: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            dt: 1.0,
            d_s: 15.0,
            t_s: 0.0,
            r1: 1.0,
            r2: 5.0,
            q1: 5.0,
            q2: 1.0,
            slack_weight: 50.0,
            eps: vec![0.2, 0.4, 0.6],
            v_s: 20.0,
            v_min: crate::kinematics::V_MIN,
            v_max: crate::kinematics::V_MAX,
            a_min: -crate::kinematics::A_LIMIT,
            a_max: crate::kinematics::A_LIMIT,
            allow_negative_margin: false,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), SmpcError> {
        let bad = |msg: String| Err(SmpcError::InvalidConfig(msg));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.eps.len() != self.horizon {
            return bad(format!(
                "need one risk level per step: got {} for horizon {}",
                self.eps.len(),
                self.horizon
            ));
        }
        for &e in &self.eps {
            if !e.is_finite() || e <= 0.0 || e >= 1.0 {
                return bad(format!("risk levels must lie in (0, 1), got {e}"));
            }
        }
        if self.eps.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("risk levels must be non-decreasing, got {:?}", self.eps));
        }
        for (name, w) in [
            ("r1", self.r1),
            ("q1", self.q1),
            ("q2", self.q2),
            ("slack_weight", self.slack_weight),
        ] {
            if !w.is_finite() || w <= 0.0 {
                return bad(format!("{name} must be positive, got {w}"));
            }
        }
        if !self.r2.is_finite() || self.r2 < 0.0 {
            return bad(format!("r2 must be non-negative, got {}", self.r2));
        }
        for (name, v) in [
            ("d_s", self.d_s),
            ("t_s", self.t_s),
            ("v_s", self.v_s),
            ("v_min", self.v_min),
            ("v_max", self.v_max),
            ("a_min", self.a_min),
            ("a_max", self.a_max),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        if self.d_s < 0.0 || self.t_s < 0.0 {
            return bad("d_s and t_s must be non-negative".into());
        }
        if self.v_min >= self.v_max {
            return bad(format!("need v_min < v_max, got [{}, {}]", self.v_min, self.v_max));
        }
        if self.a_min >= self.a_max {
            return bad(format!("need a_min < a_max, got [{}, {}]", self.a_min, self.a_max));
        }
        Ok(())
    }

    /// Risk level actually applied at step `i` (0-based): the configured one,
    /// capped at 0.5 unless negative margins are explicitly allowed.
    pub fn effective_eps(&self, i: usize) -> f64 {
        if self.allow_negative_margin {
            self.eps[i]
        } else {
            self.eps[i].min(0.5)
        }
    }
}

/// Per-replan controller output.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// First planned acceleration, clamped to the command box; what gets
    /// applied to the plant.
    pub command: f64,
    /// Planned accelerations a_0..a_{N-1}.
    pub accelerations: Vec<f64>,
    /// Predicted speeds v_1..v_N.
    pub speeds: Vec<f64>,
    /// Predicted mean headways p_1..p_N.
    pub headways: Vec<f64>,
    /// Predicted mean closing speeds pdot_1..pdot_N.
    pub rel_speeds: Vec<f64>,
    /// Safety slacks delta_1..delta_N.
    pub slacks: Vec<f64>,
    /// Margins the safety rows were tightened by, per step.
    pub margins: Vec<f64>,
    pub status: QpStatus,
    pub objective: f64,
    /// True when the solver failed and the command came from the
    /// constant-jerk brake ramp instead of the plan.
    pub fallback: bool,
}

/// Build the QP for one replan instant.
///
/// `v_now` is the current ego speed, `a_prev` the previously applied command
/// (anchor of the first acceleration-increment cost term).
pub fn build_qp(
    cfg: &MpcConfig,
    belief: &BeliefState,
    v_now: f64,
    a_prev: f64,
) -> Result<QpProblem, SmpcError> {
    cfg.validate()?;
    for (what, value) in [("current speed", v_now), ("previous command", a_prev)] {
        if !value.is_finite() {
            return Err(SmpcError::NonFinite { what, value });
        }
    }
    if (belief.dt - cfg.dt).abs() > 1e-9 {
        return Err(SmpcError::InvalidConfig(format!(
            "belief spacing {} does not match the prediction step {}",
            belief.dt, cfg.dt
        )));
    }
    let n = cfg.horizon;
    let dt = cfg.dt;
    let (p_rel0, var_rel0) = bootstrap_relative_speed(belief);
    let (var, _) = propagate_variances(belief.var_now, var_rel0, dt, n)?;

    let dim = 5 * n;
    let a_i = |i: usize| i;
    let v_i = |i: usize| n + i;
    let p_i = |i: usize| 2 * n + i;
    let pr_i = |i: usize| 3 * n + i;
    let s_i = |i: usize| 4 * n + i;

    let mut quad = DMatrix::zeros(dim, dim);
    let mut lin = DVector::zeros(dim);
    let mut constant = 0.0;

    // r1 * a_i^2 and r2 * (a_i - a_{i-1})^2 with a_{-1} = a_prev fixed.
    for i in 0..n {
        quad[(a_i(i), a_i(i))] += 2.0 * cfg.r1;
    }
    if cfg.r2 > 0.0 {
        quad[(a_i(0), a_i(0))] += 2.0 * cfg.r2;
        lin[a_i(0)] += -2.0 * cfg.r2 * a_prev;
        constant += cfg.r2 * a_prev * a_prev;
        for i in 1..n {
            quad[(a_i(i), a_i(i))] += 2.0 * cfg.r2;
            quad[(a_i(i - 1), a_i(i - 1))] += 2.0 * cfg.r2;
            quad[(a_i(i), a_i(i - 1))] += -2.0 * cfg.r2;
            quad[(a_i(i - 1), a_i(i))] += -2.0 * cfg.r2;
        }
    }
    // q1 * (v_i - v_s)^2, q2 * pdot_i^2, linear slack price.
    for i in 0..n {
        quad[(v_i(i), v_i(i))] += 2.0 * cfg.q1;
        lin[v_i(i)] += -2.0 * cfg.q1 * cfg.v_s;
        constant += cfg.q1 * cfg.v_s * cfg.v_s;
        quad[(pr_i(i), pr_i(i))] += 2.0 * cfg.q2;
        lin[s_i(i)] += cfg.slack_weight;
    }

    let mut rows = Vec::with_capacity(4 * n);
    let mut margins = Vec::with_capacity(n);
    for i in 0..n {
        // v_{i+1} = v_i + dt * a_i (v_0 = v_now).
        let mut coeffs = vec![(v_i(i), 1.0), (a_i(i), -dt)];
        let mut rhs = 0.0;
        if i == 0 {
            rhs = v_now;
        } else {
            coeffs.push((v_i(i - 1), -1.0));
        }
        rows.push(LinearRow { coeffs, lower: rhs, upper: rhs, label: RowLabel::SpeedDynamics(i) });

        // p_{i+1} = p_i + dt * pdot_i - dt^2/2 * a_i (p_0, pdot_0 fixed).
        let mut coeffs = vec![(p_i(i), 1.0), (a_i(i), 0.5 * dt * dt)];
        let mut rhs = 0.0;
        if i == 0 {
            rhs = belief.p_now + dt * p_rel0;
        } else {
            coeffs.push((p_i(i - 1), -1.0));
            coeffs.push((pr_i(i - 1), -dt));
        }
        rows.push(LinearRow { coeffs, lower: rhs, upper: rhs, label: RowLabel::HeadwayDynamics(i) });

        // pdot_{i+1} = pdot_i - dt * a_i.
        let mut coeffs = vec![(pr_i(i), 1.0), (a_i(i), dt)];
        let mut rhs = 0.0;
        if i == 0 {
            rhs = p_rel0;
        } else {
            coeffs.push((pr_i(i - 1), -1.0));
        }
        rows.push(LinearRow { coeffs, lower: rhs, upper: rhs, label: RowLabel::RelSpeedDynamics(i) });
    }
    for i in 0..n {
        // p_{i+1} - t_s * v_{i+1} + delta_{i+1} >= d_s + margin_{i+1}.
        let margin = tightening_margin(var[i + 1], cfg.effective_eps(i))?;
        margins.push(margin);
        let mut coeffs = vec![(p_i(i), 1.0), (s_i(i), 1.0)];
        if cfg.t_s != 0.0 {
            coeffs.push((v_i(i), -cfg.t_s));
        }
        rows.push(LinearRow {
            coeffs,
            lower: cfg.d_s + margin,
            upper: f64::INFINITY,
            label: RowLabel::Safety(i),
        });
    }

    let mut lower = vec![f64::NEG_INFINITY; dim];
    let mut upper = vec![f64::INFINITY; dim];
    let mut vars = vec![DecisionVar::Accel(0); dim];
    for i in 0..n {
        lower[a_i(i)] = cfg.a_min;
        upper[a_i(i)] = cfg.a_max;
        lower[v_i(i)] = cfg.v_min;
        upper[v_i(i)] = cfg.v_max;
        lower[s_i(i)] = 0.0;
        vars[a_i(i)] = DecisionVar::Accel(i);
        vars[v_i(i)] = DecisionVar::Speed(i);
        vars[p_i(i)] = DecisionVar::Headway(i);
        vars[pr_i(i)] = DecisionVar::RelSpeed(i);
        vars[s_i(i)] = DecisionVar::Slack(i);
    }

    let problem = QpProblem { quad, lin, constant, rows, lower, upper, vars };
    problem.validate()?;
    Ok(problem)
}

/// Margins the safety rows of `build_qp` would use, step by step. Exposed for
/// diagnostics and calibration tests.
pub fn safety_margins(cfg: &MpcConfig, belief: &BeliefState) -> Result<Vec<f64>, SmpcError> {
    cfg.validate()?;
    let (_, var_rel0) = bootstrap_relative_speed(belief);
    let (var, _) = propagate_variances(belief.var_now, var_rel0, cfg.dt, cfg.horizon)?;
    (0..cfg.horizon)
        .map(|i| tightening_margin(var[i + 1], cfg.effective_eps(i)))
        .collect()
}

/// One controller step: transcribe, solve, extract the plan. On solver
/// failure the command degrades to a constant-jerk ramp toward `a_min` from
/// the previously applied command.
pub fn mpc_step(
    cfg: &MpcConfig,
    belief: &BeliefState,
    v_now: f64,
    a_prev: f64,
) -> Result<MpcSolution, SmpcError> {
    mpc_step_with(cfg, belief, v_now, a_prev, &SolverSettings::default(), None)
}

/// `mpc_step` with explicit solver settings and an optional observer that
/// sees every transcribed problem and its solution (used for QP dumps).
pub fn mpc_step_with(
    cfg: &MpcConfig,
    belief: &BeliefState,
    v_now: f64,
    a_prev: f64,
    settings: &SolverSettings,
    observer: Option<&mut dyn FnMut(&QpProblem, &QpSolution)>,
) -> Result<MpcSolution, SmpcError> {
    let problem = build_qp(cfg, belief, v_now, a_prev)?;
    let solution = solve_qp_with(&problem, settings)?;
    if let Some(obs) = observer {
        obs(&problem, &solution);
    }
    let n = cfg.horizon;
    let margins = safety_margins(cfg, belief)?;
    let solved = solution.status == QpStatus::Optimal
        || (solution.status == QpStatus::MaxIterations && solution.residuals.max() <= 1e-6);
    let command = if solved {
        solution.x[0].clamp(cfg.a_min, cfg.a_max)
    } else {
        log::warn!(
            "QP solve ended {} (residual {:.2e}); ramping toward a_min",
            solution.status,
            solution.residuals.max()
        );
        (a_prev - FALLBACK_JERK * cfg.dt).clamp(cfg.a_min, cfg.a_max)
    };
    Ok(MpcSolution {
        command,
        accelerations: solution.x[0..n].to_vec(),
        speeds: solution.x[n..2 * n].to_vec(),
        headways: solution.x[2 * n..3 * n].to_vec(),
        rel_speeds: solution.x[3 * n..4 * n].to_vec(),
        slacks: solution.x[4 * n..5 * n].to_vec(),
        margins,
        status: solution.status,
        objective: solution.objective,
        fallback: !solved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn belief_far() -> BeliefState {
        BeliefState::new(1000.0, 0.25, 1000.0, 0.25, 0.0, 1.0).unwrap()
    }

    #[test]
    fn default_config_matches_published_tuning() {
        let cfg = MpcConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.horizon, 3);
        assert_eq!(cfg.dt, 1.0);
        assert_eq!(cfg.d_s, 15.0);
        assert_eq!(cfg.t_s, 0.0);
        assert_eq!(
            (cfg.r1, cfg.r2, cfg.q1, cfg.q2, cfg.slack_weight),
            (1.0, 5.0, 5.0, 1.0, 50.0)
        );
        assert_eq!(cfg.eps, vec![0.2, 0.4, 0.6]);
        assert_eq!((cfg.v_min, cfg.v_max), (0.0, 34.0));
        assert_eq!((cfg.a_min, cfg.a_max), (-6.0, 6.0));
        assert!(!cfg.allow_negative_margin);
    }

    #[test]
    fn risk_levels_cap_at_even_odds_unless_opted_in() {
        let mut cfg = MpcConfig::default();
        assert_eq!(cfg.effective_eps(0), 0.2);
        assert_eq!(cfg.effective_eps(2), 0.5);
        cfg.allow_negative_margin = true;
        assert_eq!(cfg.effective_eps(2), 0.6);
    }

    #[test]
    fn config_validation_rejects_bad_risk_schedules() {
        let mut cfg = MpcConfig { eps: vec![0.2, 0.1, 0.3], ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.eps = vec![0.2, 0.4];
        assert!(cfg.validate().is_err());
        cfg.eps = vec![0.0, 0.4, 0.6];
        assert!(cfg.validate().is_err());
        cfg = MpcConfig { r1: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = MpcConfig { v_min: 34.0, v_max: 34.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn transcription_has_five_coordinates_per_step() {
        let cfg = MpcConfig::default();
        let belief = BeliefState::new(20.0, 1.0, 18.0, 1.0, 0.0, 1.0).unwrap();
        let qp = build_qp(&cfg, &belief, 15.0, 0.0).unwrap();
        assert_eq!(qp.dim(), 15);
        assert_eq!(qp.rows.len(), 12); // 3N dynamics + N safety
        assert_eq!(qp.index_of(DecisionVar::Slack(2)), Some(14));
    }

    #[test]
    fn safety_rows_carry_the_quantile_margins() {
        // Worked belief: var path [1, 3, 7, 17], eps -> (0.2, 0.4, 0.5).
        let cfg = MpcConfig::default();
        let belief = BeliefState::new(20.0, 1.0, 18.0, 1.0, 0.0, 1.0).unwrap();
        let margins = safety_margins(&cfg, &belief).unwrap();
        assert_abs_diff_eq!(margins[0], 1.457730737277080, epsilon = 1e-12);
        assert_abs_diff_eq!(margins[1], 0.670293430275958, epsilon = 1e-12);
        assert_eq!(margins[2], 0.0);
        let qp = build_qp(&cfg, &belief, 15.0, 0.0).unwrap();
        let safety: Vec<&LinearRow> = qp
            .rows
            .iter()
            .filter(|r| matches!(r.label, RowLabel::Safety(_)))
            .collect();
        assert_eq!(safety.len(), 3);
        assert_abs_diff_eq!(safety[0].lower, 15.0 + margins[0], epsilon = 1e-12);
        assert_eq!(safety[2].lower, 15.0);
    }

    #[test]
    fn degenerate_belief_recovers_the_deterministic_floor() {
        let cfg = MpcConfig::default();
        let belief = BeliefState::degenerate(20.0, 18.0, 0.0, 1.0);
        let margins = safety_margins(&cfg, &belief).unwrap();
        assert_eq!(margins, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn equilibrium_produces_a_null_command() {
        // Far lead, at set speed, zero closing speed: nothing to do.
        let cfg = MpcConfig { v_s: 20.0, ..Default::default() };
        let sol = mpc_step(&cfg, &belief_far(), 20.0, 0.0).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(!sol.fallback);
        assert!(sol.command.abs() <= 1e-7, "command = {}", sol.command);
        assert!(sol.slacks.iter().all(|&s| s.abs() <= 1e-7));
    }

    #[test]
    fn single_step_horizon_matches_hand_solution() {
        // N=1, r1=1, r2=5, q1=1, q2=1, v_now=19, v_s=20, p_rel0=0, far lead,
        // a_prev=0: min a^2 + 5a^2 + (19+a-20)^2 + a^2 = 8a^2 - 2a + 1,
        // optimum a = 1/8.
        let cfg = MpcConfig {
            horizon: 1,
            eps: vec![0.2],
            r1: 1.0,
            r2: 5.0,
            q1: 1.0,
            q2: 1.0,
            v_s: 20.0,
            ..Default::default()
        };
        let sol = mpc_step(&cfg, &belief_far(), 19.0, 0.0).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.command, 0.125, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.speeds[0], 19.125, epsilon = 1e-7);
        let expected_obj = 8.0 * 0.125 * 0.125 - 2.0 * 0.125 + 1.0;
        assert_abs_diff_eq!(sol.objective, expected_obj, epsilon = 1e-7);
    }

    #[test]
    fn tight_headway_forces_braking_or_slack() {
        let cfg = MpcConfig::default();
        // 10 m now, closing at 2 m/s: the 15 m floor is unreachable without
        // braking; slack is priced high, so the command must go negative.
        let belief = BeliefState::new(12.0, 0.2, 10.0, 0.2, 0.0, 1.0).unwrap();
        let sol = mpc_step(&cfg, &belief, 15.0, 0.0).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.command < -1e-6 || sol.slacks[0] > 1e-6);
        assert!(sol.command >= cfg.a_min - 1e-12);
    }

    #[test]
    fn commands_respect_the_acceleration_box() {
        let cfg = MpcConfig::default();
        // Huge positive closing speed begs for max acceleration.
        let belief = BeliefState::new(40.0, 0.5, 80.0, 0.5, 0.0, 1.0).unwrap();
        let sol = mpc_step(&cfg, &belief, 5.0, 0.0).unwrap();
        assert!(sol.command <= cfg.a_max && sol.command >= cfg.a_min);
    }

    #[test]
    fn solver_failure_degrades_to_a_jerk_limited_ramp()
    {
        let cfg = MpcConfig::default();
        let belief = BeliefState::new(12.0, 0.2, 10.0, 0.2, 0.0, 1.0).unwrap();
        let settings = SolverSettings { max_iterations: 2, check_every: 1, ..Default::default() };
        let sol = mpc_step_with(&cfg, &belief, 15.0, -1.0, &settings, None).unwrap();
        if sol.fallback {
            assert_abs_diff_eq!(sol.command, -1.0 - FALLBACK_JERK * cfg.dt, epsilon = 1e-12);
        } else {
            // Polish can legitimately rescue the instance in two sweeps.
            assert_eq!(sol.status, QpStatus::Optimal);
        }
    }

    #[test]
    fn observer_sees_problem_and_solution() {
        let cfg = MpcConfig::default();
        let belief = BeliefState::new(20.0, 1.0, 18.0, 1.0, 0.0, 1.0).unwrap();
        let mut seen = 0usize;
        {
            let mut obs = |p: &QpProblem, s: &QpSolution| {
                assert_eq!(p.dim(), s.x.len());
                seen += 1;
            };
            mpc_step_with(
                &cfg,
                &belief,
                15.0,
                0.0,
                &SolverSettings::default(),
                Some(&mut obs),
            )
            .unwrap();
        }
        assert_eq!(seen, 1);
    }

    #[test]
    fn belief_spacing_must_match_the_prediction_step() {
        let cfg = MpcConfig::default();
        let belief = BeliefState::new(20.0, 1.0, 18.0, 1.0, 0.0, 0.5).unwrap();
        assert!(matches!(
            build_qp(&cfg, &belief, 15.0, 0.0),
            Err(SmpcError::InvalidConfig(_))
        ));
    }
}
