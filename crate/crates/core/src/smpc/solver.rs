//! Operator-splitting QP solver: ADMM iterations on the stacked constraint
//! system plus an active-set polish step that solves the reduced KKT system
//! directly once the active set has settled. Polish is what takes the
//! iterate from splitting-level accuracy (~1e-5) to tight KKT residuals.

use super::qp::{KktResiduals, QpProblem, QpSolution, QpStatus};
use super::SmpcError;
use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Target for the largest KKT residual.
    pub tolerance: f64,
    /// Tikhonov term keeping the x-update system positive definite.
    pub sigma: f64,
    /// Base penalty; equality rows get `rho * eq_scale`.
    pub rho: f64,
    pub eq_scale: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    /// Residuals are evaluated (and polish attempted) every this many iterations.
    pub check_every: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50_000,
            tolerance: 1e-8,
            sigma: 1e-6,
            rho: 0.1,
            eq_scale: 1e3,
            alpha: 1.6,
            check_every: 25,
        }
    }
}

/// Stacked constraint system: the problem's rows followed by one identity row
/// per variable bound, so a single projection handles both.
struct Stacked {
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    n_rows: usize,
}

impl Stacked {
    fn build(p: &QpProblem) -> Self {
        let n = p.dim();
        let m = p.rows.len() + n;
        let mut a = DMatrix::zeros(m, n);
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for (i, row) in p.rows.iter().enumerate() {
            for &(j, c) in &row.coeffs {
                a[(i, j)] += c;
            }
            l[i] = row.lower;
            u[i] = row.upper;
        }
        for j in 0..n {
            a[(p.rows.len() + j, j)] = 1.0;
            l[p.rows.len() + j] = p.lower[j];
            u[p.rows.len() + j] = p.upper[j];
        }
        Stacked { a, l, u, n_rows: p.rows.len() }
    }

    fn m(&self) -> usize {
        self.l.len()
    }

    fn is_equality(&self, i: usize) -> bool {
        self.l[i] == self.u[i]
    }
}

/// Unscaled KKT residuals for a primal/dual pair on the stacked system.
fn kkt_residuals(p: &QpProblem, st: &Stacked, x: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
    let stat_vec = &p.quad * x + &p.lin + st.a.transpose() * y;
    let stationarity = stat_vec.amax();
    let ax = &st.a * x;
    let mut primal: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for i in 0..st.m() {
        if st.l[i].is_finite() {
            primal = primal.max(st.l[i] - ax[i]);
        }
        if st.u[i].is_finite() {
            primal = primal.max(ax[i] - st.u[i]);
        }
        if st.is_equality(i) {
            continue; // equality multipliers are free
        }
        if y[i] > 0.0 {
            let slack = if st.u[i].is_finite() { (st.u[i] - ax[i]).abs() } else { 1.0 };
            complementarity = complementarity.max(y[i] * slack);
        } else if y[i] < 0.0 {
            let slack = if st.l[i].is_finite() { (ax[i] - st.l[i]).abs() } else { 1.0 };
            complementarity = complementarity.max(-y[i] * slack);
        }
    }
    KktResiduals { stationarity, primal, complementarity }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
    Fixed,
}

/// Solve the equality-constrained KKT system for a trial active set, with a
/// small dual regularization so degenerate sets stay solvable, then refine
/// against the unregularized system.
fn solve_kkt(
    p: &QpProblem,
    st: &Stacked,
    active: &[(usize, Side)],
    reg: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = p.dim();
    let na = active.len();
    let dim = n + na;
    let mut k_reg = DMatrix::zeros(dim, dim);
    k_reg.view_mut((0, 0), (n, n)).copy_from(&p.quad);
    for (a_idx, &(row, _)) in active.iter().enumerate() {
        for j in 0..n {
            let c = st.a[(row, j)];
            k_reg[(n + a_idx, j)] = c;
            k_reg[(j, n + a_idx)] = c;
        }
        k_reg[(n + a_idx, n + a_idx)] = -reg;
    }
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = -p.lin[i];
    }
    for (a_idx, &(row, side)) in active.iter().enumerate() {
        rhs[n + a_idx] = match side {
            Side::Lower | Side::Fixed => st.l[row],
            Side::Upper => st.u[row],
        };
    }
    let lu = k_reg.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // Iterative refinement against the unregularized KKT matrix.
    let mut k0 = k_reg;
    for a_idx in 0..na {
        k0[(n + a_idx, n + a_idx)] = 0.0;
    }
    for _ in 0..3 {
        let r = &rhs - &k0 * &sol;
        if r.amax() <= 1e-13 * (1.0 + rhs.amax()) {
            break;
        }
        match lu.solve(&r) {
            Some(d) => sol += d,
            None => break,
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let nu = sol.rows(n, na).into_owned();
    Some((x, nu))
}

/// Try to recover an exact solution from an ADMM iterate by guessing the
/// active set, solving the reduced KKT system, and pruning multipliers with
/// the wrong sign / admitting violated rows until the set is consistent.
fn polish(
    p: &QpProblem,
    st: &Stacked,
    x: &DVector<f64>,
    y: &DVector<f64>,
    tol: f64,
) -> Option<(DVector<f64>, DVector<f64>, KktResiduals)> {
    let m = st.m();
    let ax = &st.a * x;
    let mut active: Vec<(usize, Side)> = Vec::new();
    for i in 0..m {
        if st.is_equality(i) {
            active.push((i, Side::Fixed));
            continue;
        }
        let near_lower =
            st.l[i].is_finite() && ax[i] - st.l[i] <= 1e-6 * (1.0 + st.l[i].abs());
        let near_upper =
            st.u[i].is_finite() && st.u[i] - ax[i] <= 1e-6 * (1.0 + st.u[i].abs());
        if near_upper || (y[i] > 1e-9 && st.u[i].is_finite()) {
            active.push((i, Side::Upper));
        } else if near_lower || (y[i] < -1e-9 && st.l[i].is_finite()) {
            active.push((i, Side::Lower));
        }
    }

    for _ in 0..16 {
        let (xp, nu) = solve_kkt(p, st, &active, 1e-11)?;
        let mut keep = Vec::with_capacity(active.len());
        for (a_idx, &(row, side)) in active.iter().enumerate() {
            let ok = match side {
                Side::Fixed => true,
                Side::Upper => nu[a_idx] >= -1e-9,
                Side::Lower => nu[a_idx] <= 1e-9,
            };
            if ok {
                keep.push((row, side));
            }
        }
        if keep.len() != active.len() {
            active = keep;
            continue;
        }
        // Consistent signs: check the full problem, admitting the most
        // violated inactive row if feasibility still fails.
        let axp = &st.a * &xp;
        let mut worst = (0usize, Side::Lower, 0.0f64);
        for i in 0..m {
            if active.iter().any(|&(r, _)| r == i) {
                continue;
            }
            if st.l[i].is_finite() && st.l[i] - axp[i] > worst.2 {
                worst = (i, Side::Lower, st.l[i] - axp[i]);
            }
            if st.u[i].is_finite() && axp[i] - st.u[i] > worst.2 {
                worst = (i, Side::Upper, axp[i] - st.u[i]);
            }
        }
        if worst.2 > tol {
            active.push((worst.0, worst.1));
            continue;
        }
        let mut y_full = DVector::zeros(m);
        for (a_idx, &(row, _)) in active.iter().enumerate() {
            y_full[row] = nu[a_idx];
        }
        let res = kkt_residuals(p, st, &xp, &y_full);
        if res.max() <= tol {
            return Some((xp, y_full, res));
        }
        return None;
    }
    None
}

/// Detect a primal infeasibility certificate in the dual update direction.
fn is_infeasibility_certificate(st: &Stacked, dy: &DVector<f64>) -> bool {
    let norm = dy.amax();
    if norm <= 1e-10 {
        return false;
    }
    let eps = 1e-8 * norm;
    let at_dy = st.a.transpose() * dy;
    if at_dy.amax() > eps {
        return false;
    }
    let mut support = 0.0;
    for i in 0..st.m() {
        let d = dy[i];
        if d > eps {
            if !st.u[i].is_finite() {
                return false;
            }
            support += st.u[i] * d;
        } else if d < -eps {
            if !st.l[i].is_finite() {
                return false;
            }
            support += st.l[i] * d;
        }
    }
    support < -eps
}

pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, SmpcError> {
    solve_qp_with(problem, &SolverSettings::default())
}

pub fn solve_qp_with(
    problem: &QpProblem,
    settings: &SolverSettings,
) -> Result<QpSolution, SmpcError> {
    problem.validate()?;
    if settings.tolerance <= 0.0 || settings.rho <= 0.0 || settings.sigma <= 0.0 {
        return Err(SmpcError::InvalidConfig(
            "solver tolerance, rho, and sigma must be positive".into(),
        ));
    }
    let n = problem.dim();
    let st = Stacked::build(problem);
    let m = st.m();

    let mut rho_base = settings.rho;
    let rho_vec = |base: f64| -> DVector<f64> {
        DVector::from_fn(m, |i, _| if st.is_equality(i) { base * settings.eq_scale } else { base })
    };
    let factor = |base: f64| -> Option<Cholesky<f64, nalgebra::Dyn>> {
        let rho = rho_vec(base);
        let mut k = problem.quad.clone();
        for i in 0..n {
            k[(i, i)] += settings.sigma;
        }
        // K = P + sigma I + A' diag(rho) A
        let mut ar = st.a.clone();
        for i in 0..m {
            let scale = rho[i];
            for j in 0..n {
                ar[(i, j)] *= scale;
            }
        }
        k += st.a.transpose() * ar;
        Cholesky::new(k)
    };

    let mut chol = factor(rho_base).ok_or(SmpcError::NumericalFailure(
        "x-update system is not positive definite",
    ))?;
    let mut rho = rho_vec(rho_base);

    let mut x: DVector<f64> = DVector::zeros(n);
    let mut z = DVector::from_fn(m, |i, _| 0.0f64.clamp(st.l[i], st.u[i]));
    let mut y: DVector<f64> = DVector::zeros(m);
    let mut y_prev_check = y.clone();

    let finish = |x: &DVector<f64>, y: &DVector<f64>, status: QpStatus, iters: usize, res: KktResiduals| {
        QpSolution {
            x: x.iter().copied().collect(),
            row_duals: y.rows(0, st.n_rows).iter().copied().collect(),
            bound_duals: y.rows(st.n_rows, m - st.n_rows).iter().copied().collect(),
            objective: problem.objective_at(x),
            status,
            iterations: iters,
            residuals: res,
        }
    };

    let mut iter = 0;
    while iter < settings.max_iterations {
        iter += 1;
        // x-update
        let mut rhs = settings.sigma * &x - &problem.lin;
        let scaled = DVector::from_fn(m, |i, _| rho[i] * z[i] - y[i]);
        rhs += st.a.transpose() * scaled;
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &st.a * &x_tilde;
        // over-relaxed updates
        x = settings.alpha * &x_tilde + (1.0 - settings.alpha) * &x;
        let z_relax: DVector<f64> = settings.alpha * &z_tilde + (1.0 - settings.alpha) * &z;
        let mut z_new: DVector<f64> = DVector::zeros(m);
        for i in 0..m {
            z_new[i] = (z_relax[i] + y[i] / rho[i]).clamp(st.l[i], st.u[i]);
        }
        for i in 0..m {
            y[i] += rho[i] * (z_relax[i] - z_new[i]);
        }
        z = z_new;

        if !x.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
            return Err(SmpcError::NumericalFailure("iterate diverged"));
        }

        if iter % settings.check_every == 0 || iter == settings.max_iterations {
            let res = kkt_residuals(problem, &st, &x, &y);
            if res.max() <= settings.tolerance {
                return Ok(finish(&x, &y, QpStatus::Optimal, iter, res));
            }
            if res.max() <= 1e-3 {
                if let Some((xp, yp, rp)) = polish(problem, &st, &x, &y, settings.tolerance) {
                    return Ok(finish(&xp, &yp, QpStatus::Optimal, iter, rp));
                }
            }
            let dy = &y - &y_prev_check;
            if is_infeasibility_certificate(&st, &dy) {
                return Ok(finish(&x, &y, QpStatus::Infeasible, iter, res));
            }
            y_prev_check = y.clone();
            // Rebalance the penalty when one residual dominates.
            if res.primal > 10.0 * res.stationarity && rho_base < 1e4 {
                rho_base *= 5.0;
            } else if res.stationarity > 10.0 * res.primal && rho_base > 1e-4 {
                rho_base /= 5.0;
            } else {
                continue;
            }
            match factor(rho_base) {
                Some(c) => {
                    chol = c;
                    rho = rho_vec(rho_base);
                }
                None => return Err(SmpcError::NumericalFailure(
                    "x-update system is not positive definite",
                )),
            }
        }
    }

    let res = kkt_residuals(problem, &st, &x, &y);
    if res.max() <= settings.tolerance {
        return Ok(finish(&x, &y, QpStatus::Optimal, iter, res));
    }
    if let Some((xp, yp, rp)) = polish(problem, &st, &x, &y, settings.tolerance) {
        return Ok(finish(&xp, &yp, QpStatus::Optimal, iter, rp));
    }
    Ok(finish(&x, &y, QpStatus::MaxIterations, iter, res))
}
