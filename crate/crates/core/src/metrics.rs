//! Point-forecast accuracy metrics and the serializable evaluation report.
//!
//! The relative metrics follow the M4 competition conventions: SMAPE in
//! percent with 0/0 terms dropped, MASE scaled by the seasonal-naive
//! in-sample error, and OWA as the half-sum of both ratios against the
//! seasonally adjusted naive baseline ([`naive2`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Length(format!(
            "metric inputs have {} and {} values",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Length("metric inputs are empty".into()));
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let n = y.len() as f64;
    Ok(y.iter()
        .zip(yhat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let n = y.len() as f64;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Symmetric mean absolute percentage error in percent:
/// `(200/n) * sum |y - yhat| / (|y| + |yhat|)`, where terms with a zero
/// denominator contribute zero.
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let n = y.len() as f64;
    let sum: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            let denom = a.abs() + b.abs();
            if denom == 0.0 {
                0.0
            } else {
                (a - b).abs() / denom
            }
        })
        .sum();
    Ok(200.0 * sum / n)
}

/// Mean absolute scaled error: forecast MAE over the mean absolute
/// `m`-seasonal difference of the in-sample series.
pub fn mase(y: &[f64], yhat: &[f64], insample: &[f64], m: usize) -> Result<f64> {
    check_pair(y, yhat)?;
    if m == 0 {
        return Err(Error::Metric("seasonal period must be at least 1".into()));
    }
    if insample.len() <= m {
        return Err(Error::Metric(format!(
            "in-sample series of {} values cannot be differenced at lag {m}",
            insample.len()
        )));
    }
    let steps = insample.len() - m;
    let denom: f64 = (m..insample.len())
        .map(|t| (insample[t] - insample[t - m]).abs())
        .sum::<f64>()
        / steps as f64;
    if denom == 0.0 {
        return Err(Error::Metric(
            "seasonal-naive in-sample error is zero; MASE is undefined".into(),
        ));
    }
    Ok(mae(y, yhat)? / denom)
}

/// Overall weighted average of the two baseline-relative ratios.
pub fn owa(smape: f64, mase: f64, smape_naive2: f64, mase_naive2: f64) -> Result<f64> {
    for (name, v) in [
        ("smape", smape),
        ("mase", mase),
        ("smape_naive2", smape_naive2),
        ("mase_naive2", mase_naive2),
    ] {
        if !v.is_finite() {
            return Err(Error::Metric(format!("{name} is not finite")));
        }
    }
    if smape_naive2 <= 0.0 || mase_naive2 <= 0.0 {
        return Err(Error::Metric(
            "naive2 baseline metrics must be positive".into(),
        ));
    }
    Ok(0.5 * (smape / smape_naive2 + mase / mase_naive2))
}

/// Seasonally adjusted naive baseline, M4 style: when the series tests as
/// seasonal at period `m` (90% autocorrelation criterion), divide out
/// multiplicative seasonal indices from a centered-moving-average
/// decomposition, repeat the last adjusted value, and reseasonalize.
/// Otherwise the forecast is the plain last value. Multiplicative
/// adjustment needs strictly positive data, so series with zeros or
/// negative values fall back to the plain naive path.
pub fn naive2(insample: &[f64], m: usize, horizon: usize) -> Result<Vec<f64>> {
    if insample.is_empty() {
        return Err(Error::Length("naive2 needs an in-sample series".into()));
    }
    if horizon == 0 {
        return Err(Error::Length("naive2 horizon must be at least 1".into()));
    }
    if m == 0 {
        return Err(Error::Metric("seasonal period must be at least 1".into()));
    }
    let n = insample.len();
    let last = insample[n - 1];
    let positive = insample.iter().all(|&v| v > 0.0);
    if m == 1 || !positive || !is_seasonal(insample, m) {
        return Ok(vec![last; horizon]);
    }
    let indices = match seasonal_indices(insample, m) {
        Some(idx) => idx,
        None => return Ok(vec![last; horizon]),
    };
    let z_last = last / indices[(n - 1) % m];
    Ok((0..horizon).map(|j| z_last * indices[(n + j) % m]).collect())
}

/// 90% significance test on the lag-`m` autocorrelation, as used to decide
/// seasonal adjustment in the M4 benchmark.
fn is_seasonal(x: &[f64], m: usize) -> bool {
    let n = x.len();
    if n < 3 * m {
        return false;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if var == 0.0 {
        return false;
    }
    let acf = |lag: usize| -> f64 {
        (lag..n)
            .map(|t| (x[t] - mean) * (x[t - lag] - mean))
            .sum::<f64>()
            / var
    };
    let tail: f64 = (1..m).map(|i| acf(i).powi(2)).sum();
    let limit = 1.645 * ((1.0 + 2.0 * tail) / n as f64).sqrt();
    acf(m).abs() > limit
}

/// Multiplicative seasonal indices from a classical decomposition:
/// centered moving average (2 x m when m is even), per-phase mean of the
/// detrending ratios, normalized to mean one. `None` when some phase has
/// no usable ratio.
fn seasonal_indices(x: &[f64], m: usize) -> Option<Vec<f64>> {
    let n = x.len();
    let mut cma = vec![None; n];
    if m % 2 == 1 {
        let half = m / 2;
        for t in half..n - half {
            let w: f64 = x[t - half..=t + half].iter().sum();
            cma[t] = Some(w / m as f64);
        }
    } else {
        let half = m / 2;
        for t in half..n.saturating_sub(half) {
            let mut w = x[t - half] / 2.0 + x[t + half] / 2.0;
            w += x[t - half + 1..t + half].iter().sum::<f64>();
            cma[t] = Some(w / m as f64);
        }
    }
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for t in 0..n {
        if let Some(trend) = cma[t] {
            if trend > 0.0 {
                sums[t % m] += x[t] / trend;
                counts[t % m] += 1;
            }
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return None;
    }
    let mut idx: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let total: f64 = idx.iter().sum();
    if total <= 0.0 {
        return None;
    }
    for v in &mut idx {
        *v *= m as f64 / total;
    }
    Some(idx)
}

/// Per-horizon metric table with the provenance needed to reproduce it.
/// All values are checked finite on insertion, so a serialized report never
/// carries NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Digest of the checkpoint weights the metrics came from, when one was
    /// used.
    pub checkpoint_sha256: Option<String>,
    /// horizon -> metric name -> value.
    pub horizons: BTreeMap<usize, BTreeMap<String, f64>>,
}

impl MetricReport {
    pub fn new(dataset: impl Into<String>, seed: u64, config_sha256: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            seed,
            config_sha256: config_sha256.into(),
            checkpoint_sha256: None,
            horizons: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, horizon: usize, metric: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Metric(format!(
                "{metric} at horizon {horizon} is {value}"
            )));
        }
        self.horizons
            .entry(horizon)
            .or_default()
            .insert(metric.to_string(), value);
        Ok(())
    }

    pub fn get(&self, horizon: usize, metric: &str) -> Option<f64> {
        self.horizons.get(&horizon)?.get(metric).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
