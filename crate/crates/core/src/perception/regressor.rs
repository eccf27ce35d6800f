//! Two-layer heteroscedastic regressor: one ReLU hidden layer feeding a
//! two-channel head, mean and raw variance, with a softplus floor keeping the
//! variance strictly positive. Loss and gradient are the exact Gaussian
//! negative log-likelihood and its analytic backpropagation.

use super::sensor::ObservationPair;
use super::{HeadwayEstimate, PerceptionError};
use nalgebra::{DMatrix, DVector};

/// Floor added to the softplus-transformed variance channel.
pub const VARIANCE_EPSILON: f64 = 1e-6;

/// Numerically stable softplus: ln(1 + e^s).
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Logistic sigmoid, the softplus derivative.
fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Raw variance channel to positive variance.
pub(crate) fn variance_from_raw(s: f64) -> f64 {
    VARIANCE_EPSILON + softplus(s)
}

/// Weights of one regressor. Layout: `w1` (hidden x input) and `b1` feed the
/// ReLU layer; `w2` (2 x hidden) and `b2` produce `[mean, raw variance]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl RegressorParams {
    pub fn new(
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
    ) -> Result<Self, PerceptionError> {
        let hidden = w1.nrows();
        if hidden == 0 || w1.ncols() == 0 {
            return Err(PerceptionError::Shape("first layer has a zero dimension".into()));
        }
        if b1.len() != hidden {
            return Err(PerceptionError::Shape(format!(
                "b1 has {} entries for {} hidden units",
                b1.len(),
                hidden
            )));
        }
        if w2.nrows() != 2 || w2.ncols() != hidden {
            return Err(PerceptionError::Shape(format!(
                "w2 is {}x{}, expected 2x{hidden}",
                w2.nrows(),
                w2.ncols()
            )));
        }
        if b2.len() != 2 {
            return Err(PerceptionError::Shape(format!("b2 has {} entries, expected 2", b2.len())));
        }
        for v in w1.iter().chain(b1.iter()).chain(w2.iter()).chain(b2.iter()) {
            if !v.is_finite() {
                return Err(PerceptionError::NonFinite { what: "parameter", value: *v });
            }
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Total input width (both cameras stacked).
    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flat view used by the optimizer and by finite-difference checks:
    /// w1 row-major, then b1, then w2 row-major, then b2.
    pub fn get_param(&self, idx: usize) -> f64 {
        let (n1, nb1, n2) = (self.w1.len(), self.b1.len(), self.w2.len());
        if idx < n1 {
            self.w1[(idx / self.w1.ncols(), idx % self.w1.ncols())]
        } else if idx < n1 + nb1 {
            self.b1[idx - n1]
        } else if idx < n1 + nb1 + n2 {
            let k = idx - n1 - nb1;
            self.w2[(k / self.w2.ncols(), k % self.w2.ncols())]
        } else {
            self.b2[idx - n1 - nb1 - n2]
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (n1, nb1, n2) = (self.w1.len(), self.b1.len(), self.w2.len());
        if idx < n1 {
            let cols = self.w1.ncols();
            self.w1[(idx / cols, idx % cols)] = value;
        } else if idx < n1 + nb1 {
            self.b1[idx - n1] = value;
        } else if idx < n1 + nb1 + n2 {
            let k = idx - n1 - nb1;
            let cols = self.w2.ncols();
            self.w2[(k / cols, k % cols)] = value;
        } else {
            self.b2[idx - n1 - nb1 - n2] = value;
        }
    }
}

/// Gradient of the summed negative log-likelihood, same shapes as the
/// parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorGradient {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl RegressorGradient {
    /// Same flat indexing as [`RegressorParams::get_param`].
    pub fn get(&self, idx: usize) -> f64 {
        let (n1, nb1, n2) = (self.w1.len(), self.b1.len(), self.w2.len());
        if idx < n1 {
            self.w1[(idx / self.w1.ncols(), idx % self.w1.ncols())]
        } else if idx < n1 + nb1 {
            self.b1[idx - n1]
        } else if idx < n1 + nb1 + n2 {
            let k = idx - n1 - nb1;
            self.w2[(k / self.w2.ncols(), k % self.w2.ncols())]
        } else {
            self.b2[idx - n1 - nb1 - n2]
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Forward pass through the hidden layer for a whole batch (columns are
/// samples). Returns raw head outputs (2 x B), hidden activations (H x B),
/// and pre-activations (H x B).
pub(crate) fn forward_batch(
    params: &RegressorParams,
    inputs: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let b = inputs.ncols();
    let mut z1 = &params.w1 * inputs;
    for c in 0..b {
        for r in 0..params.hidden_dim() {
            z1[(r, c)] += params.b1[r];
        }
    }
    let hidden = z1.map(|v| v.max(0.0));
    let mut out = &params.w2 * &hidden;
    for c in 0..b {
        out[(0, c)] += params.b2[0];
        out[(1, c)] += params.b2[1];
    }
    (out, hidden, z1)
}

/// Mean/variance prediction for one observation.
pub fn regressor_forward(
    params: &RegressorParams,
    obs: &ObservationPair,
) -> Result<HeadwayEstimate, PerceptionError> {
    if 2 * obs.feature_dim() != params.input_dim() {
        return Err(PerceptionError::FeatureMismatch {
            got: obs.feature_dim(),
            want: params.input_dim() / 2,
        });
    }
    let x = DMatrix::from_vec(params.input_dim(), 1, obs.stacked());
    let (out, _, _) = forward_batch(params, &x);
    let p = out[(0, 0)];
    let var = variance_from_raw(out[(1, 0)]);
    if !p.is_finite() || !var.is_finite() {
        return Err(PerceptionError::NonFinite { what: "prediction", value: p });
    }
    Ok(HeadwayEstimate { p, var })
}

/// Summed Gaussian negative log-likelihood over a batch of columns:
/// `sum_k ln(var_k) + (d_k - p_k)^2 / var_k` (constant terms dropped).
pub(crate) fn nll_loss_batch(
    params: &RegressorParams,
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
) -> f64 {
    let (out, _, _) = forward_batch(params, inputs);
    let mut loss = 0.0;
    for k in 0..inputs.ncols() {
        let var = variance_from_raw(out[(1, k)]);
        let r = targets[k] - out[(0, k)];
        loss += var.ln() + r * r / var;
    }
    loss
}

/// Exact gradient of [`nll_loss_batch`] with respect to every parameter.
pub(crate) fn nll_gradient_batch(
    params: &RegressorParams,
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
) -> RegressorGradient {
    let b = inputs.ncols();
    let (out, hidden, z1) = forward_batch(params, inputs);
    // Head gradients: dL/dp and dL/ds (through the softplus).
    let mut g_out = DMatrix::zeros(2, b);
    for k in 0..b {
        let s = out[(1, k)];
        let var = variance_from_raw(s);
        let r = targets[k] - out[(0, k)];
        g_out[(0, k)] = -2.0 * r / var;
        g_out[(1, k)] = (1.0 / var - (r * r) / (var * var)) * sigmoid(s);
    }
    let g_w2 = &g_out * hidden.transpose();
    let g_b2 = DVector::from_fn(2, |r, _| g_out.row(r).sum());
    let mut g_hidden = params.w2.transpose() * &g_out;
    for c in 0..b {
        for r in 0..params.hidden_dim() {
            if z1[(r, c)] <= 0.0 {
                g_hidden[(r, c)] = 0.0;
            }
        }
    }
    let g_w1 = &g_hidden * inputs.transpose();
    let g_b1 = DVector::from_fn(params.hidden_dim(), |r, _| g_hidden.row(r).sum());
    RegressorGradient { w1: g_w1, b1: g_b1, w2: g_w2, b2: g_b2 }
}

fn batch_from_set(
    params: &RegressorParams,
    data: &super::training::TrainingSet,
) -> Result<(), PerceptionError> {
    if data.input_dim() != params.input_dim() {
        return Err(PerceptionError::FeatureMismatch {
            got: data.feature_dim(),
            want: params.input_dim() / 2,
        });
    }
    Ok(())
}

/// Summed negative log-likelihood of a training set under `params`.
pub fn nll_loss(
    params: &RegressorParams,
    data: &super::training::TrainingSet,
) -> Result<f64, PerceptionError> {
    batch_from_set(params, data)?;
    Ok(nll_loss_batch(params, data.inputs(), data.targets()))
}

/// Gradient of the summed negative log-likelihood over a training set.
pub fn nll_gradient(
    params: &RegressorParams,
    data: &super::training::TrainingSet,
) -> Result<RegressorGradient, PerceptionError> {
    batch_from_set(params, data)?;
    Ok(nll_gradient_batch(params, data.inputs(), data.targets()))
}
