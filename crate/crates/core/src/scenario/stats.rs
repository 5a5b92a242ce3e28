//! Quartiles and the 10×IQR outlier filter used for timing results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the outlier band in interquartile ranges.
pub const IQR_FACTOR: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("cannot summarise an empty list")]
    Empty,
    #[error("durations must be finite, got {0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub count: usize,
    pub kept: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub removed: Vec<f64>,
}

/// Linear interpolation between order statistics, `h = (n - 1) p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    quantile_skipping(sorted, None, p)
}

/// Same as [`quantile`] on `sorted` with index `skip` left out.
fn quantile_skipping(sorted: &[f64], skip: Option<usize>, p: f64) -> f64 {
    let n = sorted.len() - usize::from(skip.is_some());
    let at = |t: usize| match skip {
        Some(s) if t >= s => sorted[t + 1],
        _ => sorted[t],
    };
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    at(lo) + (h - lo as f64) * (at(hi) - at(lo))
}

/// Drops values outside `[Q1 - 10 IQR, Q3 + 10 IQR]` and summarises the rest.
///
/// The quartiles used to judge a value are those of the other values, so a
/// single extreme sample cannot widen its own band. Short lists (fewer than
/// four values) are kept whole.
pub fn timing_summary(durations: &[f64]) -> Result<TimingSummary, StatsError> {
    if durations.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(&bad) = durations.iter().find(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite(bad));
    }
    let mut sorted = durations.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut kept = Vec::with_capacity(sorted.len());
    let mut removed = Vec::new();
    for (idx, &x) in sorted.iter().enumerate() {
        let outside = sorted.len() >= 4 && {
            let q1 = quantile_skipping(&sorted, Some(idx), 0.25);
            let q3 = quantile_skipping(&sorted, Some(idx), 0.75);
            let iqr = q3 - q1;
            x < q1 - IQR_FACTOR * iqr || x > q3 + IQR_FACTOR * iqr
        };
        if outside {
            removed.push(x);
        } else {
            kept.push(x);
        }
    }
    if kept.is_empty() {
        kept = std::mem::take(&mut removed);
    }

    let q1 = quantile(&kept, 0.25);
    let q3 = quantile(&kept, 0.75);
    Ok(TimingSummary {
        count: durations.len(),
        kept: kept.len(),
        median: quantile(&kept, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
        min: kept[0],
        max: kept[kept.len() - 1],
        mean: kept.iter().sum::<f64>() / kept.len() as f64,
        removed,
    })
}
