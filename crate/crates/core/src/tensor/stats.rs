use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffixes used when aggregates are flattened into named features.
pub const AGGREGATE_NAMES: [&str; 7] = ["sum", "max", "min", "mean", "q1", "median", "q3"];

/// The seven summary statistics used at every metric level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub sum: f64,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Aggregates {
    /// Values in [`AGGREGATE_NAMES`] order.
    pub fn values(&self) -> [f64; 7] {
        [
            self.sum,
            self.max,
            self.min,
            self.mean,
            self.q1,
            self.median,
            self.q3,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, f64)> {
        AGGREGATE_NAMES.into_iter().zip(self.values())
    }
}

/// Quantile of an ascending slice by linear interpolation at position `(n - 1) * p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo + 1 >= sorted.len() {
        return sorted[lo];
    }
    sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
}

/// Sum, extrema, mean and quartiles of a non-empty finite sequence.
///
/// The sum is accumulated over the sorted values so the result does not
/// depend on input order.
pub fn aggregate(values: &[f64]) -> Result<Aggregates> {
    if values.is_empty() {
        return Err(Error::Empty("aggregate over no values"));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("aggregate element {bad}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sum: f64 = sorted.iter().sum();
    Ok(Aggregates {
        sum,
        max: sorted[sorted.len() - 1],
        min: sorted[0],
        mean: sum / sorted.len() as f64,
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    })
}
