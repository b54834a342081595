//! Metrics CSV output.

use std::fmt::Write as _;
use std::path::Path;

use crate::diagnostics::{trailing_mean, RoundRecord};
use crate::{Error, Result};

pub const METRICS_HEADER: &str =
    "round,wall_time_s,objective,rmse_test,aug_lagrangian,consensus_gap,stationarity_sq,nnz_U,nnz_V,sampled_count";

/// 17 significant digits in scientific notation; `NaN`, `inf`, `-inf` for
/// non-finite values.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn push_row(out: &mut String, round: usize, floats: [f64; 8], sampled: usize) {
    let _ = write!(out, "{round}");
    for x in floats {
        out.push(',');
        out.push_str(&format_float(x));
    }
    let _ = writeln!(out, ",{sampled}");
}

fn floats(r: &RoundRecord, wall_time: bool) -> [f64; 8] {
    [
        if wall_time { r.wall_time_s } else { 0.0 },
        r.objective,
        r.rmse_test,
        r.aug_lagrangian,
        r.consensus_gap,
        r.stationarity_sq,
        r.nnz_u,
        r.nnz_v,
    ]
}

/// The metrics file as text. `wall_time` controls whether measured time or 0
/// goes in the time column.
pub fn render_metrics(records: &[RoundRecord], wall_time: bool) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        push_row(&mut out, r.round, floats(r, wall_time), r.sampled.len());
    }
    out
}

/// Same layout with every float column replaced by its trailing mean over
/// `window` rounds (non-finite entries skipped).
pub fn render_smoothed(records: &[RoundRecord], wall_time: bool, window: usize) -> String {
    let cols: Vec<Vec<f64>> = (0..8)
        .map(|c| {
            let raw: Vec<f64> = records.iter().map(|r| floats(r, wall_time)[c]).collect();
            trailing_mean(&raw, window)
        })
        .collect();
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for (k, r) in records.iter().enumerate() {
        let row: [f64; 8] = std::array::from_fn(|c| cols[c][k]);
        push_row(&mut out, r.round, row, r.sampled.len());
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
