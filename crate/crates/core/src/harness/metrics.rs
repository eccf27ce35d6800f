//! Safety and comfort metrics over a record stream: time-to-collision,
//! time-to-safety, jerk, headway extrema, speed tracking, and the fixed-bin
//! histograms used by batch aggregation.

use super::records::StepRecord;
use super::HarnessError;
use serde::{Deserialize, Serialize};

/// Fixed-range counting histogram. Out-of-range samples clamp into the edge
/// bins so totals always equal the number of finite samples offered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(lo.is_finite() && hi.is_finite() && lo < hi, "bad histogram range");
        assert!(bins >= 1, "histogram needs at least one bin");
        Histogram { lo, hi, counts: vec![0; bins] }
    }

    /// Time-to-collision panel: 0-20 s in half-second bins.
    pub fn for_time_to_collision() -> Self {
        Histogram::new(0.0, 20.0, 40)
    }

    /// Time-to-safety panel: 0-60 s in one-second bins.
    pub fn for_time_to_safety() -> Self {
        Histogram::new(0.0, 60.0, 60)
    }

    /// Acceleration-command panel: the command box in quarter-unit bins.
    pub fn for_acceleration() -> Self {
        Histogram::new(-6.0, 6.0, 48)
    }

    /// Jerk panel, same shape as the acceleration panel.
    pub fn for_jerk() -> Self {
        Histogram::new(-6.0, 6.0, 48)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Half-open edges `[lo, hi)` of bin `i` (the last bin closes at `hi`).
    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = self.bin_width();
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }

    /// Count one sample; non-finite samples are ignored.
    pub fn add(&mut self, x: f64) {
        if !x.is_finite() {
            return;
        }
        let i = ((x - self.lo) / self.bin_width()).floor();
        let i = (i.max(0.0) as usize).min(self.counts.len() - 1);
        self.counts[i] += 1;
    }

    /// Add another histogram's counts; the shapes must match.
    pub fn merge(&mut self, other: &Histogram) -> Result<(), HarnessError> {
        if self.lo != other.lo || self.hi != other.hi || self.counts.len() != other.counts.len()
        {
            return Err(HarnessError::InvalidScenario(format!(
                "cannot merge histograms over [{}, {}]x{} and [{}, {}]x{}",
                self.lo,
                self.hi,
                self.counts.len(),
                other.lo,
                other.hi,
                other.counts.len()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Inputs the metrics need beyond the records themselves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsParams {
    /// Standstill distance of the safety floor (m).
    pub d_s: f64,
    /// Time-headway coefficient of the safety floor (s).
    pub t_s: f64,
    /// Command update period (s); the jerk denominator.
    pub replan_period: f64,
    /// Set speed the tracking error is measured against (m/s).
    pub v_s: f64,
}

/// Per-run safety and comfort summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Smallest per-frame time-to-collision; absent when the ego never
    /// closes on the lead.
    pub min_time_to_collision: Option<f64>,
    /// First time the true headway satisfies the safety floor, or the last
    /// recorded time when it never does.
    pub time_to_safety: f64,
    pub time_to_safety_reached: bool,
    /// Largest command change rate; absent with fewer than two commands.
    pub max_abs_jerk: Option<f64>,
    pub min_headway: f64,
    /// RMS of the ego speed's deviation from the set speed.
    pub speed_rms_error: f64,
    /// True exactly when the minimum headway is non-positive.
    pub collision: bool,
    pub toc_histogram: Histogram,
    pub jerk_histogram: Histogram,
}

/// Time for the gap to close at current speeds: `d / (v_ego - v_lead)` when
/// the ego is faster, floored at zero; opening or matched speeds have no
/// collision course and yield `None`.
pub fn time_to_collision(rec: &StepRecord) -> Option<f64> {
    let closing = rec.v_ego - rec.v_lead;
    if closing > 0.0 {
        Some((rec.d_true / closing).max(0.0))
    } else {
        None
    }
}

/// First recorded time the true headway reaches `d_s + t_s * v_ego`, with a
/// reached flag; unreached runs report the last recorded time.
pub fn time_to_safety(records: &[StepRecord], d_s: f64, t_s: f64) -> (f64, bool) {
    for r in records {
        if r.d_true >= d_s + t_s * r.v_ego {
            return (r.t, true);
        }
    }
    (records.last().map_or(0.0, |r| r.t), false)
}

/// Command change rates between successive replan instants.
///
/// Commands are piecewise constant, so the series samples the applied
/// acceleration every `replan_period` starting at the first frame that
/// carries a solved plan (finite slack columns) and differences neighbors.
/// The cold-start hold before the first plan is not a command and produces
/// no jerk sample.
pub fn jerk_series(records: &[StepRecord], replan_period: f64) -> Vec<f64> {
    if !(replan_period.is_finite() && replan_period > 0.0) {
        return Vec::new();
    }
    let Some(first) = records.iter().position(StepRecord::has_plan) else {
        return Vec::new();
    };
    let t0 = records[first].t;
    let commands: Vec<f64> = records[first..]
        .iter()
        .filter(|r| {
            let k = (r.t - t0) / replan_period;
            (k - k.round()).abs() <= 1e-6
        })
        .map(|r| r.a_cmd)
        .collect();
    commands.windows(2).map(|w| (w[1] - w[0]) / replan_period).collect()
}

/// Summarize one run's records.
pub fn compute_metrics(
    records: &[StepRecord],
    params: &MetricsParams,
) -> Result<MetricsReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::InvalidScenario("metrics need at least one record".into()));
    }
    if !(params.replan_period.is_finite() && params.replan_period > 0.0) {
        return Err(HarnessError::InvalidScenario(format!(
            "replan period must be positive, got {}",
            params.replan_period
        )));
    }
    for (what, v) in [("d_s", params.d_s), ("t_s", params.t_s), ("v_s", params.v_s)] {
        if !v.is_finite() {
            return Err(HarnessError::InvalidScenario(format!("{what} must be finite, got {v}")));
        }
    }

    let mut toc_histogram = Histogram::for_time_to_collision();
    let mut min_toc: Option<f64> = None;
    let mut min_headway = f64::INFINITY;
    let mut sq_sum = 0.0;
    for r in records {
        if let Some(toc) = time_to_collision(r) {
            toc_histogram.add(toc);
            min_toc = Some(min_toc.map_or(toc, |m: f64| m.min(toc)));
        }
        min_headway = min_headway.min(r.d_true);
        let e = r.v_ego - params.v_s;
        sq_sum += e * e;
    }

    let (tts, reached) = time_to_safety(records, params.d_s, params.t_s);
    let jerks = jerk_series(records, params.replan_period);
    let mut jerk_histogram = Histogram::for_jerk();
    let mut max_abs_jerk: Option<f64> = None;
    for &j in &jerks {
        jerk_histogram.add(j);
        max_abs_jerk = Some(max_abs_jerk.map_or(j.abs(), |m: f64| m.max(j.abs())));
    }

    Ok(MetricsReport {
        min_time_to_collision: min_toc,
        time_to_safety: tts,
        time_to_safety_reached: reached,
        max_abs_jerk,
        min_headway,
        speed_rms_error: (sq_sum / records.len() as f64).sqrt(),
        collision: min_headway <= 0.0,
        toc_histogram,
        jerk_histogram,
    })
}
