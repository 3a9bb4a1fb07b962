//! Repeated-sampling performance metrics.

use crate::error::{Error, Result};

/// One Monte Carlo iteration's combined estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationEstimate {
    pub value: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// Relative bias, percent.
    pub rbias: f64,
    /// Relative root mean squared error, percent.
    pub rmse: f64,
    /// Interval coverage, percent.
    pub crci: f64,
    /// Mean interval length relative to the truth, percent.
    pub rlci: f64,
    /// Mean estimated SE over the empirical SE; NaN when K < 2.
    pub rse: f64,
    pub k: usize,
}

pub fn compute_metrics(estimates: &[IterationEstimate], truth: f64) -> Result<MetricsRow> {
    if truth == 0.0 || !truth.is_finite() {
        return Err(Error::Estimator("relative metrics need a non-zero truth".into()));
    }
    let k = estimates.len();
    if k == 0 {
        return Err(Error::Estimator("no iterations to summarize".into()));
    }
    let kf = k as f64;
    let mean_err = estimates.iter().map(|e| e.value - truth).sum::<f64>() / kf;
    let mse = estimates.iter().map(|e| (e.value - truth).powi(2)).sum::<f64>() / kf;
    let covered = estimates
        .iter()
        .filter(|e| e.ci_low <= truth && truth <= e.ci_high)
        .count();
    let mean_len = estimates.iter().map(|e| e.ci_high - e.ci_low).sum::<f64>() / kf;
    let rse = if k >= 2 {
        let mean = estimates.iter().map(|e| e.value).sum::<f64>() / kf;
        let sd = (estimates.iter().map(|e| (e.value - mean).powi(2)).sum::<f64>() / (kf - 1.0)).sqrt();
        let mean_se = estimates.iter().map(|e| e.variance.max(0.0).sqrt()).sum::<f64>() / kf;
        mean_se / sd
    } else {
        f64::NAN
    };
    Ok(MetricsRow {
        rbias: 100.0 * mean_err / truth,
        rmse: 100.0 * mse.sqrt() / truth.abs(),
        crci: 100.0 * covered as f64 / kf,
        rlci: 100.0 * mean_len / truth.abs(),
        rse,
        k,
    })
}
