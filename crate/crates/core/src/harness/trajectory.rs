//! Lead-speed trace ingestion (CSV files or directories of them), the
//! speed-variation filter, and a synthetic trace generator for batch studies.

use super::HarnessError;
use crate::kinematics::{SpeedTrajectory, A_LIMIT, V_MAX, V_MIN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Traces whose speed standard deviation does not exceed this are dropped by
/// the default batch filter: nearly-constant leads exercise nothing.
pub const DEFAULT_MIN_SPEED_STD: f64 = 4.0;

fn csv_err(path: &Path, line: usize, msg: String) -> HarnessError {
    HarnessError::Csv { path: path.to_path_buf(), line, msg }
}

/// Parse one `t,v` CSV file into a uniformly sampled trajectory.
///
/// Requirements: a `t,v` header, strictly increasing uniformly spaced times
/// starting at 0, and speeds inside `[V_MIN, V_MAX]`; violations are reported
/// with their line number.
fn load_one(path: &Path) -> Result<SpeedTrajectory, HarnessError> {
    let file = fs::File::open(path)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(csv_err(path, 1, e.to_string())),
        None => return Err(csv_err(path, 1, "file is empty".into())),
    };
    if header.trim() != "t,v" {
        return Err(csv_err(path, 1, format!("expected header t,v, got {header:?}")));
    }
    let mut times = Vec::new();
    let mut speeds = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| csv_err(path, line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.trim_end().split(',');
        let (t_str, v_str) = match (fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(v), None) => (t, v),
            _ => return Err(csv_err(path, line_no, "expected exactly 2 fields".into())),
        };
        let t: f64 = t_str
            .trim()
            .parse()
            .map_err(|_| csv_err(path, line_no, format!("not a number: {t_str:?}")))?;
        let v: f64 = v_str
            .trim()
            .parse()
            .map_err(|_| csv_err(path, line_no, format!("not a number: {v_str:?}")))?;
        if !v.is_finite() || !(V_MIN..=V_MAX).contains(&v) {
            return Err(csv_err(
                path,
                line_no,
                format!("speed {v} m/s is outside [{V_MIN}, {V_MAX}] m/s"),
            ));
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(csv_err(path, line_no, format!("time {t} does not increase past {prev}")));
            }
        } else if t != 0.0 {
            return Err(csv_err(path, line_no, format!("first sample must be at t = 0, got {t}")));
        }
        times.push(t);
        speeds.push(v);
    }
    if times.len() < 2 {
        return Err(csv_err(path, 1 + times.len(), "need at least 2 samples".into()));
    }
    let dt = times[1] - times[0];
    for (i, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(csv_err(
                path,
                i + 3,
                format!("sampling is not uniform: step {} vs {}", w[1] - w[0], dt),
            ));
        }
    }
    SpeedTrajectory::new(dt, speeds).map_err(HarnessError::from)
}

/// Load lead trajectories from a `t,v` CSV file, or from every `.csv` file
/// (sorted by name) in a directory. Each entry is keyed by its file stem.
pub fn load_trajectories(path: &Path) -> Result<Vec<(String, SpeedTrajectory)>, HarnessError> {
    let stem = |p: &Path| {
        p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into())
    };
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(HarnessError::InvalidScenario(format!(
                "no .csv trajectories in {}",
                path.display()
            )));
        }
        files
            .into_iter()
            .map(|p| Ok((stem(&p), load_one(&p)?)))
            .collect()
    } else {
        Ok(vec![(stem(path), load_one(path)?)])
    }
}

/// Keep only trajectories whose speed standard deviation strictly exceeds
/// `min_std`.
pub fn filter_trajectories(
    trajectories: Vec<(String, SpeedTrajectory)>,
    min_std: f64,
) -> Vec<(String, SpeedTrajectory)> {
    trajectories.into_iter().filter(|(_, t)| t.std() > min_std).collect()
}

/// Synthesize a high-variance lead-speed trace: a steady crawl interrupted
/// by occasional sprint-away bursts (raised-cosine bumps), the profile of a
/// lead that repeatedly accelerates off and falls back to the traffic pace.
///
/// The shape is deliberately asymmetric. Bursts only ever open the gap, so
/// the follower never has to chase them; in between, the lead sits a gentle
/// couple of meters per second below the trace mean, which is the pace the
/// gap closes at when the lead comes back into sensor range. Symmetric
/// swells of the same variance would instead return at their full amplitude
/// — faster than a range-limited follower can react to smoothly. The draw
/// is retried until the sampled window shows enough variation to survive
/// the default batch filter; the modeled opening is a cut-in (a faster lead
/// merging a few meters ahead), so phases where the lead would immediately
/// brake into the gap it just created are re-rolled as implausible.
pub fn generate_lead_trajectory(seed: u64, duration: f64, sample_dt: f64) -> SpeedTrajectory {
    assert!(duration > 0.0 && sample_dt > 0.0, "duration and sample_dt must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration / sample_dt).round() as usize + 1;
    for attempt in 0.. {
        assert!(
            attempt < 4096,
            "no draw reached the variance floor; window of {duration} s is too short"
        );
        let crawl = rng.random_range(9.0..15.0);
        let mut bumps = Vec::new();
        let mut start = rng.random_range(4.5..9.0);
        while start < duration {
            let height = rng.random_range(12.0..14.0);
            let width = rng.random_range(8.0..9.5);
            // Peak bump acceleration is h*pi/w, within the vehicle limit
            // and only ever while pulling away.
            debug_assert!(height * PI / width < A_LIMIT);
            bumps.push((start, width, height));
            start += width + rng.random_range(7.0..11.0);
        }
        let speed_at = |t: f64| {
            let mut v = crawl;
            for &(t0, w, h) in &bumps {
                if t > t0 && t < t0 + w {
                    v += 0.5 * h * (1.0 - (TAU * (t - t0) / w).cos());
                }
            }
            v
        };
        let opening_holds =
            (0..=30).all(|i| speed_at(i as f64 * 0.1) >= speed_at(0.0) - 0.3);
        if !opening_holds {
            continue;
        }
        let speeds: Vec<f64> = (0..n.max(2)).map(|i| speed_at(i as f64 * sample_dt)).collect();
        let traj = SpeedTrajectory::new(sample_dt, speeds).expect("synthetic speeds stay in band");
        if traj.std() > DEFAULT_MIN_SPEED_STD + 0.05 {
            return traj;
        }
    }
    unreachable!()
}
