//! Per-frame simulation records and their CSV form.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! read-back parses to bit-identical values and rewriting a file reproduces
//! it byte for byte. `NaN` marks "no value yet": the estimate columns before
//! the first fusion and the slack columns before the first solved plan.

use super::HarnessError;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

/// State of one simulation frame: world truth, the newest fused estimate,
/// the held command, and the slacks of the last solved plan.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub x_lead: f64,
    pub v_lead: f64,
    pub x_ego: f64,
    pub v_ego: f64,
    /// True bumper-to-bumper headway; non-positive means collision.
    pub d_true: f64,
    pub p_est: f64,
    pub var_est: f64,
    /// Acceleration applied during this frame (zero-order hold).
    pub a_cmd: f64,
    /// Safety slacks of the most recent solved plan, one per horizon step.
    pub slacks: Vec<f64>,
}

impl StepRecord {
    /// True once a plan has been solved (slack columns are all finite).
    pub fn has_plan(&self) -> bool {
        !self.slacks.is_empty() && self.slacks.iter().all(|s| s.is_finite())
    }
}

const FIXED_COLUMNS: [&str; 9] =
    ["t", "x_lead", "v_lead", "x_ego", "v_ego", "d_true", "p_est", "var_est", "a_cmd"];

fn header(slack_count: usize) -> String {
    let mut h = FIXED_COLUMNS.join(",");
    for i in 1..=slack_count {
        h.push_str(&format!(",delta{i}"));
    }
    h
}

/// Write records as CSV. Every record must carry the same number of slack
/// columns (they name the horizon, which is fixed within a run).
pub fn write_records(path: &Path, records: &[StepRecord]) -> Result<(), HarnessError> {
    let n = match records.first() {
        Some(r) => r.slacks.len(),
        None => {
            return Err(HarnessError::InvalidScenario(
                "cannot write an empty record set".into(),
            ))
        }
    };
    if records.iter().any(|r| r.slacks.len() != n) {
        return Err(HarnessError::InvalidScenario(
            "records disagree on the number of slack columns".into(),
        ));
    }
    let io_err = |source| HarnessError::Io { path: path.to_path_buf(), source };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>, line: String| {
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)
    };
    write(&mut w, header(n))?;
    for r in records {
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{}",
            r.t, r.x_lead, r.v_lead, r.x_ego, r.v_ego, r.d_true, r.p_est, r.var_est, r.a_cmd
        );
        for s in &r.slacks {
            line.push(',');
            line.push_str(&format!("{s}"));
        }
        write(&mut w, line)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read a records CSV written by [`write_records`], validating the header
/// shape and that frame times strictly increase.
pub fn read_records(path: &Path) -> Result<Vec<StepRecord>, HarnessError> {
    let csv_err = |line: usize, msg: String| HarnessError::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let text = fs::read_to_string(path)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    let mut lines = text.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, h)) => h,
        None => return Err(csv_err(1, "file is empty".into())),
    };
    let columns: Vec<&str> = header_line.trim_end().split(',').collect();
    if columns.len() < FIXED_COLUMNS.len() + 1
        || columns[..FIXED_COLUMNS.len()] != FIXED_COLUMNS
    {
        return Err(csv_err(1, format!("unexpected header {header_line:?}")));
    }
    let n = columns.len() - FIXED_COLUMNS.len();
    for (i, col) in columns[FIXED_COLUMNS.len()..].iter().enumerate() {
        let want = format!("delta{}", i + 1);
        if *col != want {
            return Err(csv_err(1, format!("expected column {want}, got {col:?}")));
        }
    }

    let mut records: Vec<StepRecord> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut values = Vec::with_capacity(FIXED_COLUMNS.len() + n);
        for field in line.trim_end().split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_err(line_no, format!("not a number: {field:?}")))?;
            values.push(v);
        }
        if values.len() != FIXED_COLUMNS.len() + n {
            return Err(csv_err(
                line_no,
                format!("expected {} fields, got {}", FIXED_COLUMNS.len() + n, values.len()),
            ));
        }
        let t = values[0];
        if !t.is_finite() {
            return Err(csv_err(line_no, format!("frame time must be finite, got {t}")));
        }
        if let Some(prev) = records.last() {
            if t <= prev.t {
                return Err(csv_err(
                    line_no,
                    format!("frame time {t} does not increase past {}", prev.t),
                ));
            }
        }
        records.push(StepRecord {
            t,
            x_lead: values[1],
            v_lead: values[2],
            x_ego: values[3],
            v_ego: values[4],
            d_true: values[5],
            p_est: values[6],
            var_est: values[7],
            a_cmd: values[8],
            slacks: values[FIXED_COLUMNS.len()..].to_vec(),
        });
    }
    Ok(records)
}
