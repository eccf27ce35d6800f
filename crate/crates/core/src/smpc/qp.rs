//! Dense quadratic-program container shared by the transcription and the
//! solver, plus a human-readable dump format for offline inspection.

use super::SmpcError;
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::io::{self, Write};

/// Identity of one decision coordinate of the transcribed program.
///
/// Step indices count from the current instant: `Accel(0)` is the command
/// applied now, `Speed(0)` / `Headway(0)` / `RelSpeed(0)` / `Slack(0)` all
/// describe the first predicted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionVar {
    Accel(usize),
    Speed(usize),
    Headway(usize),
    RelSpeed(usize),
    Slack(usize),
}

impl fmt::Display for DecisionVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecisionVar::Accel(i) => write!(f, "a{i}"),
            DecisionVar::Speed(i) => write!(f, "v{}", i + 1),
            DecisionVar::Headway(i) => write!(f, "p{}", i + 1),
            DecisionVar::RelSpeed(i) => write!(f, "pdot{}", i + 1),
            DecisionVar::Slack(i) => write!(f, "delta{}", i + 1),
        }
    }
}

/// Role of one constraint row, used for dumps and for picking rows out of a
/// solved instance (e.g. which safety rows are binding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowLabel {
    SpeedDynamics(usize),
    HeadwayDynamics(usize),
    RelSpeedDynamics(usize),
    Safety(usize),
    General(usize),
}

impl fmt::Display for RowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowLabel::SpeedDynamics(i) => write!(f, "speed_dyn{}", i + 1),
            RowLabel::HeadwayDynamics(i) => write!(f, "headway_dyn{}", i + 1),
            RowLabel::RelSpeedDynamics(i) => write!(f, "relspeed_dyn{}", i + 1),
            RowLabel::Safety(i) => write!(f, "safety{}", i + 1),
            RowLabel::General(i) => write!(f, "row{i}"),
        }
    }
}

/// One linear constraint `lower <= coeffs . x <= upper` in sparse form.
/// Equality rows have `lower == upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
    pub label: RowLabel,
}

/// Convex quadratic program
/// `min 0.5 x' quad x + lin . x + constant` subject to the stacked rows and
/// per-variable bounds (`±inf` for unbounded coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
    pub rows: Vec<LinearRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub vars: Vec<DecisionVar>,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn validate(&self) -> Result<(), SmpcError> {
        let n = self.dim();
        let bad = |msg: String| Err(SmpcError::MalformedProblem(msg));
        if self.quad.nrows() != n || self.quad.ncols() != n {
            return bad(format!(
                "quadratic term is {}x{}, expected {n}x{n}",
                self.quad.nrows(),
                self.quad.ncols()
            ));
        }
        if self.lower.len() != n || self.upper.len() != n || self.vars.len() != n {
            return bad("bounds and names must match the dimension".into());
        }
        if !self.constant.is_finite() {
            return bad("objective constant is not finite".into());
        }
        for i in 0..n {
            if !self.lin[i].is_finite() {
                return bad(format!("linear coefficient {i} is not finite"));
            }
            if self.lower[i] > self.upper[i] || self.lower[i].is_nan() || self.upper[i].is_nan() {
                return bad(format!("inconsistent bounds on variable {i}"));
            }
            for j in 0..n {
                if !self.quad[(i, j)].is_finite() {
                    return bad(format!("quadratic entry ({i}, {j}) is not finite"));
                }
                if (self.quad[(i, j)] - self.quad[(j, i)]).abs() > 1e-12 {
                    return bad(format!("quadratic term is not symmetric at ({i}, {j})"));
                }
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.coeffs.is_empty() {
                return bad(format!("constraint {r} has no coefficients"));
            }
            if row.lower > row.upper || row.lower.is_nan() || row.upper.is_nan() {
                return bad(format!("constraint {r} has inconsistent bounds"));
            }
            for &(j, c) in &row.coeffs {
                if j >= n {
                    return bad(format!("constraint {r} references variable {j} of {n}"));
                }
                if !c.is_finite() {
                    return bad(format!("constraint {r} has a non-finite coefficient"));
                }
            }
        }
        Ok(())
    }

    /// Objective value at `x`, including the constant term.
    pub fn objective_at(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.quad * x)[(0, 0)] + self.lin.dot(x) + self.constant
    }

    pub fn index_of(&self, var: DecisionVar) -> Option<usize> {
        self.vars.iter().position(|&v| v == var)
    }

    /// Plain-text listing of the whole program: variables with bounds, the
    /// objective terms, and every constraint row by name.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let n = self.dim();
        writeln!(w, "# quadratic program: {} variables, {} rows", n, self.rows.len())?;
        writeln!(w, "minimize 0.5 x'Px + q'x + c")?;
        writeln!(w, "c = {}", self.constant)?;
        writeln!(w, "variables:")?;
        for i in 0..n {
            writeln!(
                w,
                "  {} in [{}, {}]  q = {}",
                self.vars[i], self.lower[i], self.upper[i], self.lin[i]
            )?;
        }
        writeln!(w, "P (row major, nonzeros):")?;
        for i in 0..n {
            let mut terms = Vec::new();
            for j in 0..n {
                if self.quad[(i, j)] != 0.0 {
                    terms.push(format!("{}*{}", self.quad[(i, j)], self.vars[j]));
                }
            }
            if !terms.is_empty() {
                writeln!(w, "  {}: {}", self.vars[i], terms.join(" + "))?;
            }
        }
        writeln!(w, "constraints:")?;
        for row in &self.rows {
            let terms: Vec<String> = row
                .coeffs
                .iter()
                .map(|&(j, c)| format!("{}*{}", c, self.vars[j]))
                .collect();
            let body = terms.join(" + ");
            if row.lower == row.upper {
                writeln!(w, "  {}: {} = {}", row.label, body, row.lower)?;
            } else if row.upper == f64::INFINITY {
                writeln!(w, "  {}: {} >= {}", row.label, body, row.lower)?;
            } else if row.lower == f64::NEG_INFINITY {
                writeln!(w, "  {}: {} <= {}", row.label, body, row.upper)?;
            } else {
                writeln!(w, "  {}: {} in [{}, {}]", row.label, body, row.lower, row.upper)?;
            }
        }
        Ok(())
    }
}

/// Terminal state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    /// KKT residuals at or below the requested tolerance.
    Optimal,
    /// Iteration budget exhausted; the returned iterate is the best found.
    MaxIterations,
    /// A primal infeasibility certificate was found.
    Infeasible,
}

impl fmt::Display for QpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QpStatus::Optimal => write!(f, "optimal"),
            QpStatus::MaxIterations => write!(f, "max-iterations"),
            QpStatus::Infeasible => write!(f, "infeasible"),
        }
    }
}

/// Unscaled KKT residuals of a candidate primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `|| P x + q + A' y ||_inf` over all variables.
    pub stationarity: f64,
    /// Largest violation of any constraint row or variable bound.
    pub primal: f64,
    /// Largest product of a multiplier with its constraint's slack.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

/// Solver output: primal iterate, multipliers for rows and bounds, objective,
/// and the residuals actually achieved.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// One multiplier per constraint row; positive pushes against the upper
    /// bound, negative against the lower.
    pub row_duals: Vec<f64>,
    /// One multiplier per variable box, same sign convention.
    pub bound_duals: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

impl QpSolution {
    /// Value of a named decision variable, if the problem defines it.
    pub fn value(&self, problem: &QpProblem, var: DecisionVar) -> Option<f64> {
        problem.index_of(var).map(|i| self.x[i])
    }

    /// Append a solution block to a problem dump.
    pub fn write_dump<W: Write>(&self, problem: &QpProblem, w: &mut W) -> io::Result<()> {
        writeln!(w, "solution:")?;
        writeln!(w, "  status = {}", self.status)?;
        writeln!(w, "  objective = {}", self.objective)?;
        writeln!(w, "  iterations = {}", self.iterations)?;
        writeln!(
            w,
            "  residuals: stationarity = {:.3e} primal = {:.3e} complementarity = {:.3e}",
            self.residuals.stationarity, self.residuals.primal, self.residuals.complementarity
        )?;
        for (i, var) in problem.vars.iter().enumerate() {
            writeln!(w, "  {} = {}", var, self.x[i])?;
        }
        Ok(())
    }
}
