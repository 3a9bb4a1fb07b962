//! Weighted logistic regression and pseudo-propensity estimation.

use nalgebra::{DMatrix, DVector};
use tracing::warn;

use crate::error::{Error, Result};
use crate::fpbb::SyntheticPopulation;
use crate::popmodel::{logistic, NonProbSample};

pub const MAX_ITER: usize = 50;
pub const REL_TOL: f64 = 1e-8;
pub const RIDGE: f64 = 1e-8;
/// Fitted probabilities are clipped to `[P_CLIP, 1 - P_CLIP]` before taking
/// odds.
pub const P_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_deviance: f64,
    /// Deviance after each accepted step, starting value first.
    pub deviance_path: Vec<f64>,
}

impl LogisticFit {
    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.beta
    }
}

fn deviance(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    let mut d = 0.0;
    for i in 0..y.len() {
        // log(1 + e^eta) computed without overflow.
        let e = eta[i];
        let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        d += w[i] * (softplus - y[i] * e);
    }
    2.0 * d
}

/// Maximizes the weighted Bernoulli log-likelihood by IRLS with
/// step-halving. Stops when the relative deviance change falls below
/// [`REL_TOL`] or after [`MAX_ITER`] iterations; separated data end at the
/// cap with `converged = false`.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    case_weights: Option<&[f64]>,
) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Data(format!("{} responses for {} rows", y.len(), n)));
    }
    let ones;
    let w = match case_weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::Data("case weights must be finite and non-negative".into()));
            }
            w
        }
        None => {
            ones = vec![1.0; n];
            &ones
        }
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic design"));
    }
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Data("logistic response must be 0/1".into()));
    }
    let wsum: f64 = w.iter().sum();
    let ybar = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wsum;
    if !(ybar > 0.0 && ybar < 1.0) {
        return Err(Error::Data("logistic response has a single class".into()));
    }

    // Start at the intercept-only MLE when the first column is constant.
    let mut beta = DVector::zeros(p);
    if p > 0 && x.column(0).iter().all(|v| *v == 1.0) {
        beta[0] = (ybar / (1.0 - ybar)).ln();
    }
    let mut dev = deviance(x, y, w, &beta);
    let mut path = vec![dev];
    let mut warned = false;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let eta = x * &beta;
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..n {
            let mu = logistic(eta[i]);
            let var = (mu * (1.0 - mu)).max(1e-300);
            let wi = w[i] * var;
            let zi = eta[i] + (y[i] - mu) / var;
            let row = x.row(i);
            for a in 0..p {
                let ra = wi * row[a];
                xtwz[a] += ra * zi;
                for b in 0..=a {
                    xtwx[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        let target = match xtwx.clone().cholesky() {
            Some(ch) => ch.solve(&xtwz),
            None => {
                if !warned {
                    warn!("logistic information matrix is singular; adding a ridge of {RIDGE}");
                    warned = true;
                }
                let trace: f64 = xtwx.trace();
                let scale = (trace / p as f64).max(1.0);
                let mut ridged = xtwx.clone();
                for a in 0..p {
                    ridged[(a, a)] += RIDGE * scale;
                }
                match ridged.cholesky() {
                    Some(ch) => ch.solve(&xtwz),
                    None => return Err(Error::Numerical("logistic IRLS system is singular".into())),
                }
            }
        };
        let mut step = &target - &beta;
        let mut new_dev = deviance(x, y, w, &(&beta + &step));
        let mut halvings = 0;
        while !(new_dev <= dev) && halvings < 30 {
            step *= 0.5;
            new_dev = deviance(x, y, w, &(&beta + &step));
            halvings += 1;
        }
        if !(new_dev <= dev) {
            // No descent direction left at machine precision.
            converged = (dev - new_dev).abs() <= REL_TOL * (dev.abs() + 0.1);
            break;
        }
        beta += step;
        let change = (dev - new_dev).abs() / (new_dev.abs() + 0.1);
        dev = new_dev;
        path.push(dev);
        if change < REL_TOL {
            converged = true;
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("logistic coefficients"));
    }
    Ok(LogisticFit {
        beta,
        converged,
        iterations,
        final_deviance: dev,
        deviance_path: path,
    })
}

/// Score vector of the weighted log-likelihood at `beta`.
pub fn logistic_score(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let eta = x * beta;
    let resid = DVector::from_iterator(
        y.len(),
        (0..y.len()).map(|i| w[i] * (y[i] - logistic(eta[i]))),
    );
    x.transpose() * resid
}

/// Which covariates enter the propensity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QrDesign {
    /// Intercept plus the covariates.
    True,
    /// Intercept plus squared covariates.
    Misspecified,
}

impl QrDesign {
    pub fn as_str(self) -> &'static str {
        match self {
            QrDesign::True => "true",
            QrDesign::Misspecified => "false",
        }
    }
}

/// Intercept followed by the covariates.
pub fn correct_design(x: &[Vec<f64>]) -> DMatrix<f64> {
    let p = x.first().map_or(0, Vec::len);
    DMatrix::from_fn(x.len(), p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] })
}

/// Intercept followed by the squared covariates.
pub fn misspecify_design(x: &[Vec<f64>]) -> DMatrix<f64> {
    let p = x.first().map_or(0, Vec::len);
    DMatrix::from_fn(x.len(), p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1].powi(2) })
}

pub fn qr_design(x: &[Vec<f64>], spec: QrDesign) -> DMatrix<f64> {
    match spec {
        QrDesign::True => correct_design(x),
        QrDesign::Misspecified => misspecify_design(x),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityAssignment {
    /// Aligned to the synthetic population rows.
    pub pi_hat: Vec<f64>,
    /// Aligned to the non-probability sample rows.
    pub pi_hat_sample: Vec<f64>,
    pub fit: LogisticFit,
}

/// Odds of clipped fitted probabilities, `p / (1 - p)`.
pub fn clipped_odds(eta: f64) -> f64 {
    let p = logistic(eta).clamp(P_CLIP, 1.0 - P_CLIP);
    p / (1.0 - p)
}

/// Pseudo-propensities from design matrices: the sample (response 1, weight
/// 1) is stacked on the synthetic population (response 0, weight =
/// multiplicity) and the selection odds are returned for both blocks.
pub fn pseudo_propensity_from_designs(
    x_sample: &DMatrix<f64>,
    x_synth: &DMatrix<f64>,
    multiplicity: &[f64],
) -> Result<PropensityAssignment> {
    let ones = vec![1.0; x_sample.nrows()];
    pseudo_propensity_weighted(x_sample, &ones, x_synth, multiplicity)
}

/// As [`pseudo_propensity_from_designs`] with case weights on the sample
/// rows, e.g. resampling counts of distinct units.
pub fn pseudo_propensity_weighted(
    x_sample: &DMatrix<f64>,
    sample_weights: &[f64],
    x_synth: &DMatrix<f64>,
    multiplicity: &[f64],
) -> Result<PropensityAssignment> {
    if sample_weights.len() != x_sample.nrows() || multiplicity.len() != x_synth.nrows() {
        return Err(Error::Data("case weights do not match the design rows".into()));
    }
    if x_sample.ncols() != x_synth.ncols() {
        return Err(Error::Data("sample and synthetic designs differ in width".into()));
    }
    let (na, ns) = (x_sample.nrows(), x_synth.nrows());
    let mut stacked = DMatrix::zeros(na + ns, x_sample.ncols());
    stacked.rows_mut(0, na).copy_from(x_sample);
    stacked.rows_mut(na, ns).copy_from(x_synth);
    let mut y = vec![1.0; na];
    y.resize(na + ns, 0.0);
    let mut w = sample_weights.to_vec();
    w.extend_from_slice(multiplicity);
    let fit = fit_logistic(&stacked, &y, Some(&w))?;
    if !fit.converged {
        warn!(iterations = fit.iterations, "propensity model did not converge");
    }
    let odds = |m: &DMatrix<f64>| -> Vec<f64> {
        fit.linear_predictor(m).iter().map(|&e| clipped_odds(e)).collect()
    };
    Ok(PropensityAssignment {
        pi_hat: odds(x_synth),
        pi_hat_sample: odds(x_sample),
        fit,
    })
}

pub fn estimate_pseudo_propensity(
    sa: &NonProbSample,
    synth: &SyntheticPopulation,
    spec: QrDesign,
) -> Result<PropensityAssignment> {
    let xs: Vec<Vec<f64>> = sa.rows.iter().map(|r| r.x.clone()).collect();
    let xu: Vec<Vec<f64>> = synth.rows.iter().map(|r| r.x.clone()).collect();
    pseudo_propensity_from_designs(
        &qr_design(&xs, spec),
        &qr_design(&xu, spec),
        &synth.multiplicities(),
    )
}
