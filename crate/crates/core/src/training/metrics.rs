use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds, in years, reported in cumulative-score tables.
pub const CS_LEVELS: std::ops::RangeInclusive<u32> = 0..=10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    /// `L` → fraction of samples with error within `L` years.
    pub cs: BTreeMap<u32, f64>,
    /// Signed `prediction − label` per sample.
    pub per_sample_errors: Vec<f64>,
}

impl Metrics {
    pub fn from_errors(errors: Vec<f64>, strict: bool) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Usage("cannot compute metrics over an empty dataset".into()));
        }
        let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64;
        let cs = CS_LEVELS
            .map(|l| (l, cumulative_score(&errors, f64::from(l), strict)))
            .collect();
        Ok(Metrics {
            mae,
            cs,
            per_sample_errors: errors,
        })
    }

    pub fn cs_at(&self, level: u32) -> f64 {
        self.cs.get(&level).copied().unwrap_or(f64::NAN)
    }
}

/// Fraction of `errors` with `|e| ≤ level`, or `< level` when `strict`.
pub fn cumulative_score(errors: &[f64], level: f64, strict: bool) -> f64 {
    let hits = errors
        .iter()
        .filter(|e| if strict { e.abs() < level } else { e.abs() <= level })
        .count();
    hits as f64 / errors.len() as f64
}

/// MAE of always predicting the mean of `reference` on `labels`.
pub fn mean_predictor_mae(reference: &[f64], labels: &[f64]) -> f64 {
    let mean = reference.iter().sum::<f64>() / reference.len() as f64;
    labels.iter().map(|y| (y - mean).abs()).sum::<f64>() / labels.len() as f64
}
