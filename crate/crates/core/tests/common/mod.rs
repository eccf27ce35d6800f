//! Shared fixtures and independent oracles for the integration suites.
//!
//! Everything here deliberately re-derives results through a different route
//! than the library (bisection instead of rational approximations, sampling
//! instead of closed forms, exhaustive enumeration instead of iterative
//! solving) so agreement is evidence, not tautology.

#![allow(dead_code)] // each test binary uses its own subset

use headway::perception::{
    build_ensemble, synth_observe, EnsemblePlan, RegressorParams, SensorModel, TrainingSet,
};
use headway::smpc::{LinearRow, QpProblem, QpSolution, RowLabel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::OnceLock;

/// Trained ensemble plus the sensor it was trained on.
pub struct Fixture {
    pub members: Vec<RegressorParams>,
    pub sensor: SensorModel,
}

/// Default-sensor ensemble trained once per test binary and shared by every
/// test that needs a realistic estimator.
pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let sensor = SensorModel::default();
        let set = uniform_training_set(&sensor, 2000, 11);
        let members = build_ensemble(&set, &EnsemblePlan::default()).expect("fixture trains");
        Fixture { members, sensor }
    })
}

/// Noise-free-sensor ensemble: observations carry no measurement noise, so
/// closed-loop behavior isolates the controller from estimator scatter.
pub fn clean_fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let sensor =
            SensorModel { noise_base: 0.0, noise_growth: 0.0, ..SensorModel::default() };
        let set = uniform_training_set(&sensor, 2000, 12);
        let members = build_ensemble(&set, &EnsemblePlan::default()).expect("fixture trains");
        Fixture { members, sensor }
    })
}

/// Labeled observations with true headways drawn uniformly over the sensor's
/// declared range.
pub fn uniform_training_set(model: &SensorModel, n: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<_> = (0..n)
        .map(|_| {
            let d = rng.random_range(model.d_lo..model.d_hi);
            (d, synth_observe(model, d, false, &mut rng).expect("in-range observation"))
        })
        .collect();
    TrainingSet::new(pairs, model.d_lo, model.d_hi).expect("non-empty in-range set")
}

/// Inverse error function by bisection on `libm::erf` — no series, no
/// rational fits, just the monotonicity of erf.
pub fn bisect_inverse_erf(y: f64) -> f64 {
    assert!(y.abs() < 1.0, "bisection oracle domain is (-1, 1)");
    let (mut lo, mut hi) = (-6.0_f64, 6.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if libm::erf(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Sample mean and population variance of the equal-weight Gaussian mixture
/// defined by `(mean, variance)` component stats.
pub fn mc_mixture(components: &[(f64, f64)], samples: usize, seed: u64) -> (f64, f64) {
    assert!(!components.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let (p, var) = components[rng.random_range(0..components.len())];
        let z: f64 = normal.sample(&mut rng);
        let x = p + z * var.sqrt();
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / samples as f64;
    (mean, sum_sq / samples as f64 - mean * mean)
}

/// Strictly convex random QP: `Q = M'M + alpha I`, a full box on a prefix of
/// the coordinates, and a few one-sided rows built around a strictly interior
/// witness point so the instance is always feasible.
pub fn random_qp(seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=15);
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let alpha = rng.random_range(0.1..2.0);
    let quad = {
        let mut q = m.transpose() * &m;
        for i in 0..n {
            q[(i, i)] += alpha;
        }
        // Symmetrize after the product to keep validate()'s exact check.
        let qt = q.transpose();
        (q + qt) * 0.5
    };
    let lin = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));

    let n_boxed = rng.random_range(0..=n.min(6));
    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    let mut witness = vec![0.0; n];
    for i in 0..n {
        witness[i] = rng.random_range(-2.0..2.0);
        if i < n_boxed {
            let half_width = rng.random_range(0.2..2.5);
            lower[i] = witness[i] - half_width;
            upper[i] = witness[i] + half_width;
        }
    }

    let n_rows = rng.random_range(0..=3);
    let rows = (0..n_rows)
        .map(|r| {
            let coeffs: Vec<(usize, f64)> =
                (0..n).map(|j| (j, rng.random_range(-1.0..1.0))).collect();
            let at_witness: f64 =
                coeffs.iter().map(|&(j, c)| c * witness[j]).sum();
            LinearRow {
                coeffs,
                lower: f64::NEG_INFINITY,
                upper: at_witness + rng.random_range(0.1..2.0),
                label: RowLabel::General(r),
            }
        })
        .collect();

    let vars = (0..n).map(headway::smpc::DecisionVar::Accel).collect();
    QpProblem { quad, lin, constant: rng.random_range(-1.0..1.0), rows, lower, upper, vars }
}

/// Global optimum of a strictly convex QP by exhaustive active-set
/// enumeration.
///
/// Every candidate active set is solved as an equality-constrained program;
/// feasible candidates are compared by objective. For a strictly convex
/// objective the true optimum's active set is among the candidates and no
/// feasible candidate can do better, so the minimum over candidates is the
/// global optimum. Returns `None` only if no candidate is feasible (never for
/// the generator above, which builds around an interior witness).
pub fn brute_force_optimum(p: &QpProblem) -> Option<f64> {
    let n = p.dim();
    let boxed: Vec<usize> =
        (0..n).filter(|&i| p.lower[i].is_finite() || p.upper[i].is_finite()).collect();
    for &i in &boxed {
        // The enumeration below assumes two-sided boxes (3 states per coord).
        assert!(p.lower[i].is_finite() && p.upper[i].is_finite());
    }
    let n_rows = p.rows.len();
    let states_per_box = 3usize;
    let box_combos = states_per_box.pow(boxed.len() as u32);
    let row_combos = 1usize << n_rows;

    let mut best: Option<f64> = None;
    for row_mask in 0..row_combos {
        for box_code in 0..box_combos {
            // Assemble the candidate equality system.
            let mut act_rows: Vec<(Vec<f64>, f64)> = Vec::new();
            for r in 0..n_rows {
                if row_mask >> r & 1 == 1 {
                    let mut dense = vec![0.0; n];
                    for &(j, c) in &p.rows[r].coeffs {
                        dense[j] += c;
                    }
                    act_rows.push((dense, p.rows[r].upper));
                }
            }
            let mut code = box_code;
            for &i in &boxed {
                let state = code % states_per_box;
                code /= states_per_box;
                if state > 0 {
                    let mut dense = vec![0.0; n];
                    dense[i] = 1.0;
                    let level = if state == 1 { p.lower[i] } else { p.upper[i] };
                    act_rows.push((dense, level));
                }
            }
            let k = act_rows.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            let mut rhs = DVector::zeros(n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p.quad);
            for (e, (dense, level)) in act_rows.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + e, j)] = dense[j];
                    kkt[(j, n + e)] = dense[j];
                }
                rhs[n + e] = *level;
            }
            for j in 0..n {
                rhs[j] = -p.lin[j];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, n).into_owned();
            if x.iter().any(|v| !v.is_finite()) {
                continue;
            }
            // Feasibility of the full constraint set, with a small slop so
            // boundary candidates are kept.
            let tol = 1e-7;
            let mut feasible = (0..n)
                .all(|i| x[i] >= p.lower[i] - tol && x[i] <= p.upper[i] + tol);
            for row in &p.rows {
                let ax: f64 = row.coeffs.iter().map(|&(j, c)| c * x[j]).sum();
                feasible &= ax >= row.lower - tol && ax <= row.upper + tol;
            }
            // Dependent active rows make the KKT system singular-ish; verify
            // the equalities actually hold instead of trusting the solve.
            for (dense, level) in &act_rows {
                let ax: f64 = (0..n).map(|j| dense[j] * x[j]).sum();
                feasible &= (ax - level).abs() <= 1e-6;
            }
            if !feasible {
                continue;
            }
            let obj = 0.5 * (x.transpose() * &p.quad * &x)[(0, 0)]
                + p.lin.dot(&x)
                + p.constant;
            best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
    }
    best
}

/// Worst KKT residual of a primal/dual pair, recomputed from scratch with the
/// solver's sign convention (positive multipliers push against upper bounds).
pub fn max_kkt_residual(p: &QpProblem, s: &QpSolution) -> f64 {
    let n = p.dim();
    let x = DVector::from_vec(s.x.clone());
    let mut stat = &p.quad * &x + &p.lin;
    for (r, row) in p.rows.iter().enumerate() {
        for &(j, c) in &row.coeffs {
            stat[j] += s.row_duals[r] * c;
        }
    }
    for j in 0..n {
        stat[j] += s.bound_duals[j];
    }
    let mut worst = stat.amax();

    let mut check = |value: f64, lo: f64, hi: f64, dual: f64| {
        if lo.is_finite() {
            worst = worst.max(lo - value);
        }
        if hi.is_finite() {
            worst = worst.max(value - hi);
        }
        if lo < hi {
            if dual > 0.0 {
                worst = worst.max(dual * if hi.is_finite() { (hi - value).abs() } else { 1.0 });
            } else if dual < 0.0 {
                worst = worst.max(-dual * if lo.is_finite() { (value - lo).abs() } else { 1.0 });
            }
        }
    };
    for (r, row) in p.rows.iter().enumerate() {
        let ax: f64 = row.coeffs.iter().map(|&(j, c)| c * s.x[j]).sum();
        check(ax, row.lower, row.upper, s.row_duals[r]);
    }
    for j in 0..n {
        check(s.x[j], p.lower[j], p.upper[j], s.bound_duals[j]);
    }
    worst
}
