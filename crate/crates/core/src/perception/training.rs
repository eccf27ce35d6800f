//! Training data container with its CSV form, and the SGD-with-momentum
//! training loop that keeps the best validation-loss parameters.

use super::regressor::{nll_gradient_batch, nll_loss_batch, RegressorParams};
use super::sensor::ObservationPair;
use super::PerceptionError;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};

/// Labeled observations, stored column-wise for batched math. Every target
/// must lie inside the declared headway range.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    feature_dim: usize,
    d_lo: f64,
    d_hi: f64,
}

impl TrainingSet {
    pub fn new(
        pairs: Vec<(f64, ObservationPair)>,
        d_lo: f64,
        d_hi: f64,
    ) -> Result<Self, PerceptionError> {
        if pairs.is_empty() {
            return Err(PerceptionError::EmptyTrainingSet);
        }
        if !(d_lo.is_finite() && d_hi.is_finite() && d_lo < d_hi) {
            return Err(PerceptionError::InvalidConfig(format!(
                "bad target range [{d_lo}, {d_hi}]"
            )));
        }
        let feature_dim = pairs[0].1.feature_dim();
        for (index, (d, obs)) in pairs.iter().enumerate() {
            if obs.feature_dim() != feature_dim {
                return Err(PerceptionError::Shape(format!(
                    "row {index} has {} features per camera, expected {feature_dim}",
                    obs.feature_dim()
                )));
            }
            if !d.is_finite() || *d < d_lo || *d > d_hi {
                return Err(PerceptionError::TargetOutOfRange {
                    index,
                    value: *d,
                    lo: d_lo,
                    hi: d_hi,
                });
            }
        }
        let n = pairs.len();
        let inputs = DMatrix::from_fn(2 * feature_dim, n, |r, c| pairs[c].1.stacked()[r]);
        let targets = DVector::from_fn(n, |r, _| pairs[r].0);
        Ok(Self { inputs, targets, feature_dim, d_lo, d_hi })
    }

    /// Like [`TrainingSet::new`] but silently dropping out-of-range targets.
    /// Returns the set and how many rows were dropped.
    pub fn filtered(
        pairs: Vec<(f64, ObservationPair)>,
        d_lo: f64,
        d_hi: f64,
    ) -> Result<(Self, usize), PerceptionError> {
        let before = pairs.len();
        let kept: Vec<_> = pairs
            .into_iter()
            .filter(|(d, _)| d.is_finite() && *d >= d_lo && *d <= d_hi)
            .collect();
        let dropped = before - kept.len();
        Ok((Self::new(kept, d_lo, d_hi)?, dropped))
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.len() == 0
    }

    /// Features per camera.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Regressor input width (both cameras).
    pub fn input_dim(&self) -> usize {
        2 * self.feature_dim
    }

    pub fn range(&self) -> (f64, f64) {
        (self.d_lo, self.d_hi)
    }

    pub(crate) fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub(crate) fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn observation(&self, i: usize) -> ObservationPair {
        let col = self.inputs.column(i);
        let f = self.feature_dim;
        ObservationPair::new(
            col.iter().take(f).copied().collect(),
            col.iter().skip(f).take(f).copied().collect(),
        )
        .expect("stored columns are valid observations")
    }

    /// CSV layout: header `d,f1..f{2F}`, then one row per labeled
    /// observation, features stacked left camera first.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "d")?;
        for j in 1..=self.input_dim() {
            write!(w, ",f{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            write!(w, "{}", self.targets[i])?;
            for r in 0..self.input_dim() {
                write!(w, ",{}", self.inputs[(r, i)])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Parse the CSV layout produced by [`TrainingSet::write_csv`]. Errors
    /// carry 1-based line numbers.
    pub fn read_csv<R: BufRead>(r: R, d_lo: f64, d_hi: f64) -> Result<Self, PerceptionError> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(h))) => h,
            Some((_, Err(e))) => {
                return Err(PerceptionError::Csv { line: 1, msg: e.to_string() })
            }
            None => return Err(PerceptionError::Csv { line: 1, msg: "file is empty".into() }),
        };
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.first() != Some(&"d") || cols.len() < 3 {
            return Err(PerceptionError::Csv {
                line: 1,
                msg: format!("expected header d,f1..f2F, got {header:?}"),
            });
        }
        let input_dim = cols.len() - 1;
        if input_dim % 2 != 0 {
            return Err(PerceptionError::Csv {
                line: 1,
                msg: format!("feature count {input_dim} is odd; cameras must match"),
            });
        }
        let mut pairs = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|e| PerceptionError::Csv { line: line_no, msg: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != input_dim + 1 {
                return Err(PerceptionError::Csv {
                    line: line_no,
                    msg: format!("expected {} fields, got {}", input_dim + 1, fields.len()),
                });
            }
            let mut values = Vec::with_capacity(fields.len());
            for f in &fields {
                let v: f64 = f.trim().parse().map_err(|_| PerceptionError::Csv {
                    line: line_no,
                    msg: format!("not a number: {f:?}"),
                })?;
                values.push(v);
            }
            let obs = ObservationPair::new(
                values[1..1 + input_dim / 2].to_vec(),
                values[1 + input_dim / 2..].to_vec(),
            )
            .map_err(|e| PerceptionError::Csv { line: line_no, msg: e.to_string() })?;
            pairs.push((values[0], obs));
        }
        Self::new(pairs, d_lo, d_hi)
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 100,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |msg: String| Err(PerceptionError::InvalidConfig(msg));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Training outcome: best-validation parameters plus the per-epoch
/// validation loss curve (mean per datum).
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: RegressorParams,
    pub val_history: Vec<f64>,
    pub best_epoch: usize,
}

fn init_params(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> RegressorParams {
    // Uniform(-sqrt(k), sqrt(k)) with k = 1/fan_in, layer by layer; sampling
    // order is part of the determinism contract.
    let k1 = (1.0 / input_dim as f64).sqrt();
    let w1 = DMatrix::from_fn(hidden, input_dim, |_, _| rng.random_range(-k1..k1));
    let b1 = DVector::from_fn(hidden, |_, _| rng.random_range(-k1..k1));
    let k2 = (1.0 / hidden as f64).sqrt();
    let w2 = DMatrix::from_fn(2, hidden, |_, _| rng.random_range(-k2..k2));
    let b2 = DVector::from_fn(2, |_, _| rng.random_range(-k2..k2));
    RegressorParams::new(w1, b1, w2, b2).expect("init shapes are consistent")
}

// Inverse of the variance positivity transform, for seeding the raw
// variance channel at a chosen output variance.
fn softplus_inverse(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        (v.exp_m1()).ln()
    }
}

/// Train one regressor with minibatch SGD plus classical momentum on the
/// mean per-datum likelihood. A deterministic 80/20 split (by the config
/// seed) provides validation; the parameters returned are the ones with the
/// lowest validation loss, not the final iterate.
///
/// Inputs are standardized to the train split's per-feature mean and spread
/// for the duration of training, then the affine transform is folded back
/// into the first layer, so callers always see a plain network over raw
/// features. The output head starts at the best constant predictor (train
/// target mean and variance); without that seed the variance channel soaks
/// up the initial error and the mean channel crawls.
pub fn train_regressor_detailed(
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<TrainReport, PerceptionError> {
    cfg.validate()?;
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(data.input_dim(), cfg.hidden_dim, &mut rng);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = if n >= 5 { n / 5 } else { usize::from(n >= 2) };
    let (val_idx, train_idx): (Vec<usize>, Vec<usize>) = if n_val == 0 {
        (order.clone(), order.clone())
    } else {
        (order[..n_val].to_vec(), order[n_val..].to_vec())
    };

    // Feature standardization statistics from the train split only.
    let dim = data.input_dim();
    let mut mu = DVector::zeros(dim);
    let mut sigma = DVector::zeros(dim);
    for r in 0..dim {
        let mut sum = 0.0;
        for &c in &train_idx {
            sum += data.inputs[(r, c)];
        }
        let mean = sum / train_idx.len() as f64;
        let mut ss = 0.0;
        for &c in &train_idx {
            ss += (data.inputs[(r, c)] - mean).powi(2);
        }
        mu[r] = mean;
        sigma[r] = (ss / train_idx.len() as f64).sqrt().max(1e-9);
    }
    let standardized =
        DMatrix::from_fn(dim, n, |r, c| (data.inputs[(r, c)] - mu[r]) / sigma[r]);

    // Head seed: mean channel at the train target mean, variance channel
    // low. Raw-variance gradients are strong from below (they scale with
    // err²/var) but vanish from above (they scale with 1/var), so a low seed
    // lets the variance rise exactly where the residuals demand it instead
    // of stranding every point at an inflated constant.
    let t_mean = train_idx.iter().map(|&c| data.targets[c]).sum::<f64>()
        / train_idx.len() as f64;
    let head = params.param_count() - 2;
    params.set_param(head, t_mean);
    params.set_param(head + 1, softplus_inverse(1.0));

    let val_inputs = standardized.select_columns(val_idx.iter());
    let val_targets = DVector::from_fn(val_idx.len(), |r, _| data.targets[val_idx[r]]);

    let mut velocity = vec![0.0f64; params.param_count()];
    let mut shuffled = train_idx;
    let mut best: Option<(f64, RegressorParams, usize)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        shuffled.shuffle(&mut rng);
        for chunk in shuffled.chunks(cfg.batch_size) {
            let x = standardized.select_columns(chunk.iter());
            let d = DVector::from_fn(chunk.len(), |r, _| data.targets[chunk[r]]);
            let grad = nll_gradient_batch(&params, &x, &d);
            let scale = 1.0 / chunk.len() as f64;
            for i in 0..velocity.len() {
                velocity[i] =
                    cfg.momentum * velocity[i] - cfg.learning_rate * scale * grad.get(i);
                params.set_param(i, params.get_param(i) + velocity[i]);
            }
        }
        let val_loss =
            nll_loss_batch(&params, &val_inputs, &val_targets) / val_targets.len() as f64;
        if !val_loss.is_finite() {
            return Err(PerceptionError::Diverged { epoch, loss: val_loss });
        }
        history.push(val_loss);
        let better = best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true);
        if better {
            best = Some((val_loss, params.clone(), epoch));
        }
    }
    let (_, mut params, best_epoch) = best.expect("epochs >= 1");
    // Fold the standardization into the first layer: the returned network
    // consumes raw features.
    let hidden = params.hidden_dim();
    for i in 0..hidden {
        let mut shift = 0.0;
        for j in 0..dim {
            let scaled = params.w1[(i, j)] / sigma[j];
            shift += scaled * mu[j];
            params.w1[(i, j)] = scaled;
        }
        params.b1[i] -= shift;
    }
    Ok(TrainReport { params, val_history: history, best_epoch })
}

/// [`train_regressor_detailed`] without the diagnostics.
pub fn train_regressor(
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<RegressorParams, PerceptionError> {
    Ok(train_regressor_detailed(data, cfg)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::regressor::regressor_forward;
    use crate::perception::sensor::{synth_observe, SensorModel};
    use std::io::BufReader;

    fn obs2(a: f64, b: f64) -> ObservationPair {
        ObservationPair::new(vec![a], vec![b]).unwrap()
    }

    fn noisy_line_set(n: usize, seed: u64) -> TrainingSet {
        // Feature pair moves linearly with the target plus small noise.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(f64, ObservationPair)> = (0..n)
            .map(|_| {
                let d = rng.random_range(2.0..20.0);
                let eps = rng.random_range(-0.05..0.05);
                (d, obs2(0.5 * d + eps, 0.5 * d - eps))
            })
            .collect();
        TrainingSet::new(pairs, 1.0, 25.0).unwrap()
    }

    #[test]
    fn construction_enforces_the_target_range() {
        let err = TrainingSet::new(vec![(30.0, obs2(1.0, 2.0))], 1.0, 25.0).unwrap_err();
        assert!(matches!(err, PerceptionError::TargetOutOfRange { index: 0, .. }));
        assert!(err.to_string().contains("[1, 25]"));
        assert!(TrainingSet::new(vec![], 1.0, 25.0).is_err());
        // Mixed feature widths are rejected.
        let err = TrainingSet::new(
            vec![
                (5.0, obs2(1.0, 2.0)),
                (6.0, ObservationPair::new(vec![1.0, 2.0], vec![3.0, 4.0]).unwrap()),
            ],
            1.0,
            25.0,
        )
        .unwrap_err();
        assert!(matches!(err, PerceptionError::Shape(_)));
    }

    #[test]
    fn filtered_drops_and_counts_out_of_range_rows() {
        let (set, dropped) = TrainingSet::filtered(
            vec![
                (5.0, obs2(1.0, 2.0)),
                (26.0, obs2(1.0, 2.0)),
                (0.5, obs2(1.0, 2.0)),
                (24.0, obs2(1.0, 2.0)),
            ],
            1.0,
            25.0,
        )
        .unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = SensorModel::default();
        let pairs: Vec<(f64, ObservationPair)> = (0..20)
            .map(|_| {
                let d = rng.random_range(1.0..25.0);
                (d, synth_observe(&model, d, false, &mut rng).unwrap())
            })
            .collect();
        let set = TrainingSet::new(pairs, 1.0, 25.0).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("d,f1,f2,"));
        let back = TrainingSet::read_csv(BufReader::new(&buf[..]), 1.0, 25.0).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "d,f1,f2\n5.0,1.0,2.0\n6.0,oops,2.0\n";
        let err = TrainingSet::read_csv(BufReader::new(text.as_bytes()), 1.0, 25.0).unwrap_err();
        match err {
            PerceptionError::Csv { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("oops"));
            }
            other => panic!("unexpected error {other:?}"),
        }
        let text = "d,f1,f2\n5.0,1.0\n";
        let err = TrainingSet::read_csv(BufReader::new(text.as_bytes()), 1.0, 25.0).unwrap_err();
        assert!(matches!(err, PerceptionError::Csv { line: 2, .. }));
        let text = "d,f1,f2,f3\n5.0,1.0,2.0,3.0\n";
        let err = TrainingSet::read_csv(BufReader::new(text.as_bytes()), 1.0, 25.0).unwrap_err();
        assert!(matches!(err, PerceptionError::Csv { line: 1, .. }));
        let err = TrainingSet::read_csv(BufReader::new(&b""[..]), 1.0, 25.0).unwrap_err();
        assert!(matches!(err, PerceptionError::Csv { line: 1, .. }));
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let set = noisy_line_set(120, 11);
        let cfg = TrainConfig { epochs: 5, hidden_dim: 8, ..Default::default() };
        let a = train_regressor(&set, &cfg).unwrap();
        let b = train_regressor(&set, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train_regressor(&set, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn validation_loss_improves_on_an_easy_constant_problem() {
        // Constant target, noise-free constant features: the optimum drives
        // the loss toward the variance floor; early epochs must descend.
        let pairs: Vec<(f64, ObservationPair)> =
            (0..50).map(|_| (10.0, obs2(0.8, 0.6))).collect();
        let set = TrainingSet::new(pairs, 1.0, 25.0).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            hidden_dim: 4,
            batch_size: 10,
            learning_rate: 5e-3,
            ..Default::default()
        };
        let report = train_regressor_detailed(&set, &cfg).unwrap();
        let h = &report.val_history;
        assert_eq!(h.len(), 10);
        assert!(
            h.last().unwrap() < h.first().unwrap(),
            "validation loss should drop: {h:?}"
        );
        // Best epoch must index the minimum of the curve.
        let min_idx = h
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(report.best_epoch, min_idx);
    }

    #[test]
    fn trained_regressor_beats_the_initial_one() {
        let set = noisy_line_set(300, 5);
        let cfg = TrainConfig { epochs: 40, hidden_dim: 16, batch_size: 30, ..Default::default() };
        let trained = train_regressor(&set, &cfg).unwrap();
        // Probe on fresh draws from the same generator family.
        let probe = noisy_line_set(50, 999);
        let mut err_sum = 0.0;
        for i in 0..probe.len() {
            let est = regressor_forward(&trained, &probe.observation(i)).unwrap();
            err_sum += (est.p - probe.target(i)).abs();
        }
        let mean_err = err_sum / probe.len() as f64;
        assert!(mean_err < 1.0, "trained mean abs error {mean_err}");
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let set = noisy_line_set(10, 0);
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { hidden_dim: 0, ..Default::default() },
        ] {
            assert!(train_regressor(&set, &cfg).is_err());
        }
    }
}
