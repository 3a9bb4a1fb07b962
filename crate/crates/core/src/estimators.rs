//! Per-replicate point estimators and Rubin's combining rule.

use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::smoothers::SmootherKind;

/// Estimation methods. `UwA`/`FwA` act on the non-probability sample,
/// `UwR`/`FwR` on the reference survey; `FwA` needs the true selection
/// probabilities and so exists only in simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    UwR,
    FwR,
    UwA,
    FwA,
    Ipsw,
    Gppp,
    Pspp,
    Lwp,
    Aipw,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::UwR,
        Method::FwR,
        Method::UwA,
        Method::FwA,
        Method::Ipsw,
        Method::Gppp,
        Method::Pspp,
        Method::Lwp,
        Method::Aipw,
    ];

    pub const DOUBLY_ROBUST: [Method; 4] = [Method::Gppp, Method::Pspp, Method::Lwp, Method::Aipw];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::UwR => "UW_R",
            Method::FwR => "FW_R",
            Method::UwA => "UW_A",
            Method::FwA => "FW_A",
            Method::Ipsw => "IPSW",
            Method::Gppp => "GPPP",
            Method::Pspp => "PSPP",
            Method::Lwp => "LWP",
            Method::Aipw => "AIPW",
        }
    }

    /// Baselines do not depend on the propensity or prediction models.
    pub fn is_baseline(self) -> bool {
        matches!(self, Method::UwR | Method::FwR | Method::UwA | Method::FwA)
    }

    /// Reference-survey baselines need outcomes on the reference rows.
    pub fn needs_reference_outcome(self) -> bool {
        matches!(self, Method::UwR | Method::FwR)
    }

    pub fn uses_prediction_model(self) -> bool {
        matches!(self, Method::Gppp | Method::Pspp | Method::Lwp | Method::Aipw)
    }

    /// Smoother backing the prediction model.
    pub fn smoother(self) -> Option<SmootherKind> {
        match self {
            Method::Gppp => Some(SmootherKind::Gp),
            Method::Pspp => Some(SmootherKind::PSpline),
            Method::Lwp => Some(SmootherKind::LinearInInversePi),
            Method::Aipw => Some(SmootherKind::Plain),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::Config(format!("unknown method `{}`", s.trim())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateRecord {
    pub method: Method,
    pub b: usize,
    pub l: usize,
    pub value: f64,
    pub n_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedEstimate {
    pub method: Method,
    pub point: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub df: usize,
}

/// Reference distribution for the 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CiReference {
    #[default]
    StudentT,
    Normal,
}

impl FromStr for CiReference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t" => Ok(CiReference::StudentT),
            "z" => Ok(CiReference::Normal),
            other => Err(Error::Config(format!("ci_reference must be t or z, got `{other}`"))),
        }
    }
}

impl CiReference {
    pub fn as_str(self) -> &'static str {
        match self {
            CiReference::StudentT => "t",
            CiReference::Normal => "z",
        }
    }
}

fn check_denominator(n_hat: f64) -> Result<()> {
    if !(n_hat > 0.0) || !n_hat.is_finite() {
        return Err(Error::Estimator(format!("population size {n_hat} is not positive")));
    }
    Ok(())
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Estimator(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

/// Prediction-based mean: sample residuals plus synthetic-population
/// predictions weighted by multiplicity, over the population size.
pub fn estimate_model_based(
    y_sample: &[f64],
    yhat_sample: &[f64],
    yhat_synth: &[f64],
    multiplicity: &[f64],
    n_hat: f64,
) -> Result<f64> {
    check_denominator(n_hat)?;
    check_lengths(y_sample.len(), yhat_sample.len(), "sample predictions")?;
    check_lengths(yhat_synth.len(), multiplicity.len(), "synthetic predictions")?;
    let resid: f64 = y_sample.iter().zip(yhat_sample).map(|(y, h)| y - h).sum();
    let pred: f64 = yhat_synth.iter().zip(multiplicity).map(|(h, m)| h * m).sum();
    Ok((resid + pred) / n_hat)
}

/// Augmented inverse propensity weighting: residuals divided by the
/// pseudo-propensity, plus the synthetic-population prediction total.
pub fn estimate_aipw(
    y_sample: &[f64],
    yhat_sample: &[f64],
    pi_sample: &[f64],
    yhat_synth: &[f64],
    multiplicity: &[f64],
    n_hat: f64,
) -> Result<f64> {
    check_denominator(n_hat)?;
    check_lengths(y_sample.len(), yhat_sample.len(), "sample predictions")?;
    check_lengths(y_sample.len(), pi_sample.len(), "sample propensities")?;
    check_lengths(yhat_synth.len(), multiplicity.len(), "synthetic predictions")?;
    if pi_sample.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::Estimator("pseudo-propensity must be positive".into()));
    }
    let resid: f64 = y_sample
        .iter()
        .zip(yhat_sample)
        .zip(pi_sample)
        .map(|((y, h), p)| (y - h) / p)
        .sum();
    let pred: f64 = yhat_synth.iter().zip(multiplicity).map(|(h, m)| h * m).sum();
    Ok((resid + pred) / n_hat)
}

/// Hájek ratio with pseudo-weights `1 / pi`.
pub fn estimate_ipsw(y: &[f64], pi: &[f64]) -> Result<f64> {
    check_lengths(y.len(), pi.len(), "propensities")?;
    if pi.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::Estimator("pseudo-propensity must be positive".into()));
    }
    let w: Vec<f64> = pi.iter().map(|p| 1.0 / p).collect();
    estimate_fw(y, &w)
}

pub fn estimate_naive(y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Estimator("empty sample".into()));
    }
    Ok(y.iter().sum::<f64>() / y.len() as f64)
}

/// Weighted mean `sum(w y) / sum(w)`.
pub fn estimate_fw(y: &[f64], w: &[f64]) -> Result<f64> {
    check_lengths(y.len(), w.len(), "weights")?;
    if y.is_empty() {
        return Err(Error::Estimator("empty sample".into()));
    }
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::Estimator("weights sum to zero".into()));
    }
    Ok(y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw)
}

/// Degrees of freedom `min(m - H, B - 1)`, floored at one.
pub fn rubin_df(m: usize, h: usize, b: usize) -> usize {
    m.saturating_sub(h).min(b.saturating_sub(1)).max(1)
}

pub fn quantile_975(df: usize, reference: CiReference) -> f64 {
    match reference {
        CiReference::Normal => Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.975),
        CiReference::StudentT => StudentsT::new(0.0, 1.0, df as f64)
            .expect("positive df")
            .inverse_cdf(0.975),
    }
}

/// Rubin's rule with zero within-imputation variance: the point is the
/// grand mean over the `B x L` grid and the variance is
/// `(B + 1) / (B (B - 1)) * sum_b (mean_b - point)^2`.
pub fn rubin_combine(
    records: &[EstimateRecord],
    b: usize,
    l: usize,
    m: usize,
    h: usize,
    reference: CiReference,
) -> Result<CombinedEstimate> {
    if b < 2 || l < 1 {
        return Err(Error::Config(format!("need B >= 2 and L >= 1, got B={b}, L={l}")));
    }
    let method = records
        .first()
        .map(|r| r.method)
        .ok_or(Error::IncompleteGrid { b, l, found: 0 })?;
    let mut grid = vec![None; b * l];
    for r in records {
        if r.method != method {
            return Err(Error::Estimator("records mix several methods".into()));
        }
        if r.b >= b || r.l >= l {
            return Err(Error::IncompleteGrid { b, l, found: records.len() });
        }
        if !r.value.is_finite() {
            return Err(Error::NonFinite("estimate record"));
        }
        grid[r.b * l + r.l] = Some(r.value);
    }
    if grid.iter().any(Option::is_none) || records.len() != b * l {
        return Err(Error::IncompleteGrid { b, l, found: records.len() });
    }
    let values: Vec<f64> = grid.into_iter().flatten().collect();
    let b_means: Vec<f64> = values.chunks(l).map(|c| c.iter().sum::<f64>() / l as f64).collect();
    let point = b_means.iter().sum::<f64>() / b as f64;
    let bf = b as f64;
    let ss: f64 = b_means.iter().map(|v| (v - point).powi(2)).sum();
    let variance = (bf + 1.0) / (bf * (bf - 1.0)) * ss;
    let df = rubin_df(m, h, b);
    let half = quantile_975(df, reference) * variance.sqrt();
    Ok(CombinedEstimate {
        method,
        point,
        variance,
        ci_low: point - half,
        ci_high: point + half,
        df,
    })
}
