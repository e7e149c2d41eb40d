//! Source tables for histograms and normal Q-Q plots of cohort parameters.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `count / (n * width)`, comparable with a density curve.
    pub density: f64,
    /// Standard normal density at the bin centre.
    pub normal_density: f64,
}

/// Equal-width histogram over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InsufficientData("histogram needs finite values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::ConstantSample);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = values.len() as f64;
    let std = standard_normal();
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| {
            let a = lo + width * k as f64;
            let b = if k + 1 == bins { hi } else { lo + width * (k + 1) as f64 };
            HistogramBin {
                lo: a,
                hi: b,
                count,
                density: count as f64 / (n * width),
                normal_density: std.pdf(0.5 * (a + b)),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    /// Standard normal quantile at Blom's plotting position `(i - 3/8) / (n + 1/4)`.
    pub theoretical: f64,
    pub sample: f64,
}

/// Sorted sample against standard normal quantiles.
pub fn normal_qq(values: &[f64]) -> Result<Vec<QqPoint>> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InsufficientData("Q-Q table needs finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let std = standard_normal();
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, sample)| QqPoint {
            theoretical: std.inverse_cdf((i as f64 + 1.0 - 0.375) / (n + 0.25)),
            sample,
        })
        .collect())
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}
