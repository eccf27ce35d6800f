//! Deep-ensemble construction, the mixture-moment fusion rule, and the
//! on-disk container (a JSON manifest referencing one JSON file per member).

use super::regressor::{regressor_forward, RegressorParams, VARIANCE_EPSILON};
use super::sensor::{ObservationPair, SensorModel};
use super::training::{train_regressor, TrainConfig, TrainingSet};
use super::{HeadwayEstimate, PerceptionError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Recipe for a diverse ensemble: member `i` takes the `i`-th entry (cycled)
/// of the width and batch-size lists, and a seed derived from `base_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePlan {
    pub members: usize,
    pub hidden_widths: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub base_seed: u64,
}

impl Default for EnsemblePlan {
    fn default() -> Self {
        Self {
            members: 6,
            hidden_widths: vec![16, 24, 32, 48, 64, 96],
            batch_sizes: vec![16, 24, 32, 20, 28, 40],
            epochs: 100,
            learning_rate: 1e-3,
            momentum: 0.9,
            base_seed: 0,
        }
    }
}

/// Seed for member `index`: a fixed odd-constant stride keeps members
/// distinct for any base seed.
pub fn member_seed(base_seed: u64, index: usize) -> u64 {
    base_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Train every member of the plan on the same data. Diversity comes from the
/// initialization/shuffling seeds plus the width and batch-size cycles.
pub fn build_ensemble(
    data: &TrainingSet,
    plan: &EnsemblePlan,
) -> Result<Vec<RegressorParams>, PerceptionError> {
    if plan.members < 2 {
        return Err(PerceptionError::TooFewMembers { got: plan.members, min: 2 });
    }
    if plan.hidden_widths.is_empty() || plan.batch_sizes.is_empty() {
        return Err(PerceptionError::InvalidConfig(
            "ensemble plan needs at least one width and one batch size".into(),
        ));
    }
    let mut members = Vec::with_capacity(plan.members);
    for i in 0..plan.members {
        let cfg = TrainConfig {
            hidden_dim: plan.hidden_widths[i % plan.hidden_widths.len()],
            batch_size: plan.batch_sizes[i % plan.batch_sizes.len()],
            learning_rate: plan.learning_rate,
            momentum: plan.momentum,
            epochs: plan.epochs,
            seed: member_seed(plan.base_seed, i),
        };
        members.push(train_regressor(data, &cfg)?);
        log::debug!("trained ensemble member {} (hidden {})", i, cfg.hidden_dim);
    }
    Ok(members)
}

/// Fuse member predictions into one Gaussian by moment matching: the mean is
/// the member average, the variance is the average member variance plus the
/// spread of the member means.
pub fn ensemble_estimate(
    members: &[RegressorParams],
    obs: &ObservationPair,
) -> Result<HeadwayEstimate, PerceptionError> {
    if members.is_empty() {
        return Err(PerceptionError::TooFewMembers { got: 0, min: 1 });
    }
    let n = members.len() as f64;
    let mut means = Vec::with_capacity(members.len());
    let mut var_sum = 0.0;
    for m in members {
        let est = regressor_forward(m, obs)?;
        means.push(est.p);
        var_sum += est.var;
    }
    let p = means.iter().sum::<f64>() / n;
    let spread = means.iter().map(|m| (m - p) * (m - p)).sum::<f64>() / n;
    Ok(HeadwayEstimate { p, var: var_sum / n + spread })
}

#[derive(Serialize, Deserialize)]
struct MemberFile {
    input_dim: usize,
    hidden_dim: usize,
    variance_epsilon: f64,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    feature_dim: usize,
    members: Vec<String>,
    sensor: SensorModel,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], path: &Path) -> Result<DMatrix<f64>, PerceptionError> {
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(PerceptionError::ModelFile {
            path: path.to_path_buf(),
            msg: "ragged or empty weight matrix".into(),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

/// Write one JSON file per member plus `manifest.json` into `dir`. Returns
/// the manifest path. The training-time sensor model travels with the
/// ensemble so downstream consumers observe through the same law.
pub fn save_ensemble(
    dir: &Path,
    members: &[RegressorParams],
    sensor: &SensorModel,
) -> Result<PathBuf, PerceptionError> {
    if members.is_empty() {
        return Err(PerceptionError::TooFewMembers { got: 0, min: 1 });
    }
    sensor.validate()?;
    let io_err = |path: &Path| {
        let p = path.to_path_buf();
        move |source: std::io::Error| PerceptionError::Io { path: p.clone(), source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut names = Vec::with_capacity(members.len());
    for (i, m) in members.iter().enumerate() {
        if m.input_dim() != 2 * sensor.feature_dim {
            return Err(PerceptionError::FeatureMismatch {
                got: sensor.feature_dim,
                want: m.input_dim() / 2,
            });
        }
        let name = format!("member_{i:02}.json");
        let file = MemberFile {
            input_dim: m.input_dim(),
            hidden_dim: m.hidden_dim(),
            variance_epsilon: VARIANCE_EPSILON,
            w1: matrix_rows(&m.w1),
            b1: m.b1.iter().copied().collect(),
            w2: matrix_rows(&m.w2),
            b2: m.b2.iter().copied().collect(),
        };
        let path = dir.join(&name);
        let json = serde_json::to_string_pretty(&file).expect("member serializes");
        fs::write(&path, json).map_err(io_err(&path))?;
        names.push(name);
    }
    let manifest = ManifestFile {
        feature_dim: sensor.feature_dim,
        members: names,
        sensor: sensor.clone(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}

/// Load an ensemble saved by [`save_ensemble`]. Member files resolve
/// relative to the manifest's directory.
pub fn load_ensemble(
    manifest_path: &Path,
) -> Result<(Vec<RegressorParams>, SensorModel), PerceptionError> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|source| PerceptionError::Io { path: manifest_path.to_path_buf(), source })?;
    let manifest: ManifestFile =
        serde_json::from_str(&text).map_err(|e| PerceptionError::ModelFile {
            path: manifest_path.to_path_buf(),
            msg: e.to_string(),
        })?;
    manifest.sensor.validate()?;
    if manifest.feature_dim != manifest.sensor.feature_dim {
        return Err(PerceptionError::ModelFile {
            path: manifest_path.to_path_buf(),
            msg: format!(
                "manifest feature_dim {} disagrees with its sensor's {}",
                manifest.feature_dim, manifest.sensor.feature_dim
            ),
        });
    }
    if manifest.members.is_empty() {
        return Err(PerceptionError::TooFewMembers { got: 0, min: 1 });
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut members = Vec::with_capacity(manifest.members.len());
    for name in &manifest.members {
        let path = base.join(name);
        let text = fs::read_to_string(&path)
            .map_err(|source| PerceptionError::Io { path: path.clone(), source })?;
        let file: MemberFile = serde_json::from_str(&text).map_err(|e| {
            PerceptionError::ModelFile { path: path.clone(), msg: e.to_string() }
        })?;
        if file.variance_epsilon != VARIANCE_EPSILON {
            return Err(PerceptionError::ModelFile {
                path,
                msg: format!(
                    "variance floor {} differs from this build's {}",
                    file.variance_epsilon, VARIANCE_EPSILON
                ),
            });
        }
        if file.input_dim != 2 * manifest.feature_dim {
            return Err(PerceptionError::ModelFile {
                path,
                msg: format!(
                    "member input width {} does not match 2x{} features",
                    file.input_dim, manifest.feature_dim
                ),
            });
        }
        let w1 = matrix_from_rows(&file.w1, &path)?;
        let w2 = matrix_from_rows(&file.w2, &path)?;
        let params = RegressorParams::new(
            w1,
            DVector::from_vec(file.b1.clone()),
            w2,
            DVector::from_vec(file.b2.clone()),
        )?;
        if params.hidden_dim() != file.hidden_dim || params.input_dim() != file.input_dim {
            return Err(PerceptionError::ModelFile {
                path,
                msg: "declared dimensions disagree with the stored weights".into(),
            });
        }
        members.push(params);
    }
    Ok((members, manifest.sensor))
}
