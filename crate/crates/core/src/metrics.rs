//! Task metrics and multi-run aggregation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "rmse")]
    Rmse,
    #[serde(rename = "log_rmse")]
    LogRmse,
    #[serde(rename = "accuracy")]
    Accuracy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::LogRmse => "log_rmse",
            MetricKind::Accuracy => "accuracy",
        }
    }

    /// Whether larger values are better.
    pub fn higher_is_better(self) -> bool {
        self == MetricKind::Accuracy
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(MetricKind::Rmse),
            "log_rmse" => Ok(MetricKind::LogRmse),
            "accuracy" => Ok(MetricKind::Accuracy),
            _ => Err(Error::Report(format!("unknown metric kind {s:?}"))),
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("length mismatch: {a} predictions vs {b} targets")));
    }
    if a == 0 {
        return Err(Error::Data("metric over an empty set".into()));
    }
    Ok(())
}

/// Root mean squared error over paired values. For two-output tasks pass the
/// concatenation of both output streams.
pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), targets.len())?;
    let sse: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// RMSE over log-space predictions and targets. Units are log units.
pub fn log_rmse(preds: &[f64], log_targets: &[f64]) -> Result<f64> {
    rmse(preds, log_targets)
}

/// Fraction of exact label matches.
pub fn accuracy(pred_labels: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(pred_labels.len(), labels.len())?;
    let hits = pred_labels.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest score; ties go to the smallest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Mean and sample standard deviation (n - 1 denominator).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Aggregation(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, var.sqrt()))
}

/// Formats with 3 decimals, rounding exact ties to even.
pub fn fmt3(x: f64) -> String {
    // `{:.3}` rounds the exact binary value; ties only occur for dyadic
    // rationals and those already resolve half-to-even.
    format!("{x:.3}")
}

/// Table cell in the `mean±std` form; std omitted when absent.
pub fn format_cell(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{}±{}", fmt3(mean), fmt3(s)),
        None => fmt3(mean),
    }
}
