//! Penalized partially linear regression: a linear block plus a smooth
//! function of the log pseudo-propensity `g`.
//!
//! The smooth term is a Matérn kernel expansion (GP), a cubic
//! truncated-power spline with a ridge penalty (PSPLINE), a single
//! unpenalized `1/pi` column (LINEAR_IN_INVERSE_PI), or absent (PLAIN).
//! The smoothing parameter is chosen by GCV over a grid, and the logit link
//! runs penalized IRLS with GCV re-selection at each step.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use tracing::warn;

use crate::error::{Error, Result};
use crate::linalg::PivotedQr;
use crate::popmodel::logistic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SmootherKind {
    Gp,
    PSpline,
    LinearInInversePi,
    Plain,
}

impl SmootherKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SmootherKind::Gp => "GP",
            SmootherKind::PSpline => "PSPLINE",
            SmootherKind::LinearInInversePi => "LINEAR_IN_INVERSE_PI",
            SmootherKind::Plain => "PLAIN",
        }
    }
}

impl fmt::Display for SmootherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Link {
    Identity,
    Logit,
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" => Ok(Link::Identity),
            "logit" => Ok(Link::Logit),
            other => Err(Error::Config(format!("unknown link `{other}`"))),
        }
    }
}

/// Bound on the logit linear predictor.
const ETA_CLAMP: f64 = 30.0;

/// 15 log-spaced points on `[1e-4, 1e4]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..15).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 14.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherSpec {
    pub kind: SmootherKind,
    pub link: Link,
    pub lambda_grid: Vec<f64>,
    pub knots: usize,
}

impl SmootherSpec {
    pub fn new(kind: SmootherKind, link: Link) -> Self {
        SmootherSpec {
            kind,
            link,
            lambda_grid: default_lambda_grid(),
            knots: 10,
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.lambda_grid = grid;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::Config("lambda grid is empty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::Config("lambda grid values must be positive".into()));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("lambda grid must be sorted".into()));
        }
        if self.kind == SmootherKind::PSpline && self.knots < 4 {
            return Err(Error::Config("a cubic spline needs at least 4 knots".into()));
        }
        Ok(())
    }
}

/// Simplified Matérn covariance `(1 + d/rho) exp(-d/rho)`.
pub fn matern_kernel(d: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::NonPositiveRange(rho));
    }
    Ok(matern(d / rho))
}

#[inline]
fn matern(t: f64) -> f64 {
    (1.0 + t) * (-t).exp()
}

/// Kernel range: the largest pairwise distance between inputs.
pub fn default_rho(inputs: &[f64]) -> Result<f64> {
    let max = inputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = inputs.iter().copied().fold(f64::INFINITY, f64::min);
    if inputs.len() < 2 || !(max > min) {
        return Err(Error::DegenerateInputs);
    }
    Ok(max - min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherFit {
    pub kind: SmootherKind,
    pub link: Link,
    /// Coefficients of the caller's linear columns.
    pub theta: DVector<f64>,
    /// Unpenalized coefficients of the g-block: the GP slope, the spline's
    /// `u, u^2, u^3` terms, or the `1/pi` coefficient.
    pub g_coef: Vec<f64>,
    /// Kernel weights (GP) or truncated-power coefficients (PSPLINE).
    pub v: DVector<f64>,
    /// Selected smoothing parameter; zero for unpenalized fits.
    pub lambda: f64,
    pub rho: f64,
    pub train_inputs: Vec<f64>,
    /// Knot positions on the unit-scaled input.
    pub knots: Vec<f64>,
    pub g_min: f64,
    pub g_range: f64,
    pub sigma2_hat: f64,
    pub edf: f64,
    pub gcv: f64,
    /// GCV score of every grid point, in grid order.
    pub gcv_path: Vec<(f64, f64)>,
    /// Linear columns dropped as empty or collinear.
    pub dropped: Vec<usize>,
    /// Fitted values on the response scale.
    pub fitted: Vec<f64>,
    pub iterations: usize,
}

enum Penalty<'a> {
    None,
    Kernel(&'a DMatrix<f64>),
    Ridge(&'a DMatrix<f64>),
}

struct Solved {
    beta: DVector<f64>,
    pen: DVector<f64>,
    lambda: f64,
    edf: f64,
    gcv: f64,
    path: Vec<(f64, f64)>,
    dropped: Vec<usize>,
    eta: DVector<f64>,
}

fn gcv_score(n_eff: f64, rss: f64, edf: f64) -> f64 {
    let denom = n_eff - edf;
    if denom <= 1e-12 * n_eff {
        f64::INFINITY
    } else {
        n_eff * rss / (denom * denom)
    }
}

/// Minimizes `sum c_i (y_i - x_i b - k_i v)^2 + lambda * P(v)` for each
/// grid value and keeps the GCV minimizer.
fn solve_penalized(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    c: &[f64],
    n_eff: f64,
    penalty: &Penalty<'_>,
    grid: &[f64],
) -> Result<Solved> {
    let n = x.nrows();
    let s: Vec<f64> = c.iter().map(|v| v.sqrt()).collect();
    let mut xs = x.clone();
    for (i, si) in s.iter().enumerate() {
        xs.row_mut(i).scale_mut(*si);
    }
    let ys = DVector::from_iterator(n, (0..n).map(|i| s[i] * y[i]));
    let qr = PivotedQr::new(&xs);
    let r = qr.rank;
    let mut qty = ys.clone();
    qr.apply_qt_vec(&mut qty);
    let dropped = qr.dropped();

    let unpenalized = |qty: &DVector<f64>| {
        let rss: f64 = qty.rows(r, n - r).norm_squared();
        let edf = r as f64;
        let beta = qr.solve_from_qty(qty);
        let eta = x * &beta;
        Solved {
            beta,
            pen: DVector::zeros(0),
            lambda: 0.0,
            edf,
            gcv: gcv_score(n_eff, rss, edf),
            path: Vec::new(),
            dropped: dropped.clone(),
            eta,
        }
    };

    match penalty {
        Penalty::None => Ok(unpenalized(&qty)),
        Penalty::Kernel(k) => {
            if n == r {
                let mut out = unpenalized(&qty);
                out.pen = DVector::zeros(n);
                out.lambda = grid[0];
                return Ok(out);
            }
            let mut kt = (*k).clone();
            for i in 0..n {
                for j in 0..n {
                    kt[(i, j)] *= s[i] * s[j];
                }
            }
            let m = n - r;
            let full = qr.congruence(&kt);
            let block = full.view((r, r), (m, m)).clone_owned();
            let eig = SymmetricEigen::new(block);
            let sigma: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
            let a = eig.eigenvectors.transpose() * qty.rows(r, m);

            let mut path = Vec::with_capacity(grid.len());
            let mut best = (f64::INFINITY, grid[0], 0.0);
            for &lam in grid {
                let mut rss = 0.0;
                let mut edf = r as f64;
                for i in 0..m {
                    let shrink = lam / (sigma[i] + lam);
                    rss += shrink * shrink * a[i] * a[i];
                    edf += sigma[i] / (sigma[i] + lam);
                }
                let g = gcv_score(n_eff, rss, edf);
                path.push((lam, g));
                if g < best.0 {
                    best = (g, lam, edf);
                }
            }
            let (gcv, lambda, edf) = best;
            let coef = DVector::from_iterator(m, (0..m).map(|i| a[i] / (sigma[i] + lambda)));
            let tail = &eig.eigenvectors * coef;
            let mut u = DVector::zeros(n);
            u.rows_mut(r, m).copy_from(&tail);
            qr.apply_q_vec(&mut u);
            let mut resid = &ys - &kt * &u;
            qr.apply_qt_vec(&mut resid);
            let beta = qr.solve_from_qty(&resid);
            let v = DVector::from_iterator(n, (0..n).map(|i| s[i] * u[i]));
            let eta = x * &beta + *k * &v;
            Ok(Solved {
                beta,
                pen: v,
                lambda,
                edf,
                gcv,
                path,
                dropped,
                eta,
            })
        }
        Penalty::Ridge(z) => {
            let q = z.ncols();
            let mut zs = (*z).clone();
            for (i, si) in s.iter().enumerate() {
                zs.row_mut(i).scale_mut(*si);
            }
            let mut qz = zs.clone();
            qr.apply_qt(&mut qz);
            let m = n - r;
            let zp = qz.rows(r, m);
            let zy = qty.rows(r, m);
            let gram = zp.transpose() * zp;
            let eig = SymmetricEigen::new(gram);
            let sv: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
            let tau = eig.eigenvectors.transpose() * (zp.transpose() * zy);
            let norm2 = zy.norm_squared();

            let mut path = Vec::with_capacity(grid.len());
            let mut best = (f64::INFINITY, grid[0], 0.0);
            for &lam in grid {
                let mut explained = 0.0;
                let mut edf = r as f64;
                for i in 0..q {
                    let d = sv[i] + lam;
                    explained += tau[i] * tau[i] * (sv[i] + 2.0 * lam) / (d * d);
                    edf += sv[i] / d;
                }
                let g = gcv_score(n_eff, (norm2 - explained).max(0.0), edf);
                path.push((lam, g));
                if g < best.0 {
                    best = (g, lam, edf);
                }
            }
            let (gcv, lambda, edf) = best;
            let coef = DVector::from_iterator(q, (0..q).map(|i| tau[i] / (sv[i] + lambda)));
            let pen = &eig.eigenvectors * coef;
            let resid = &qty - &qz * &pen;
            let beta = qr.solve_from_qty(&resid);
            let eta = x * &beta + *z * &pen;
            Ok(Solved {
                beta,
                pen,
                lambda,
                edf,
                gcv,
                path,
                dropped,
                eta,
            })
        }
    }
}

/// Kernel Gram matrix of 1-D inputs.
pub fn kernel_matrix(g: &[f64], rho: f64) -> DMatrix<f64> {
    let n = g.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = matern((g[i] - g[j]).abs() / rho);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn spline_knots(count: usize) -> Vec<f64> {
    (1..=count).map(|j| j as f64 / (count + 1) as f64).collect()
}

fn tpow(u: f64, knot: f64) -> f64 {
    let d = u - knot;
    if d > 0.0 {
        d * d * d
    } else {
        0.0
    }
}

/// Unpenalized g-block and penalized basis for the given inputs.
fn g_blocks(
    kind: SmootherKind,
    g: &[f64],
    g_min: f64,
    g_range: f64,
    knots: &[f64],
) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let n = g.len();
    match kind {
        SmootherKind::Gp => (DMatrix::from_fn(n, 1, |i, _| g[i]), None),
        SmootherKind::LinearInInversePi => (DMatrix::from_fn(n, 1, |i, _| (-g[i]).exp()), None),
        SmootherKind::Plain => (DMatrix::zeros(n, 0), None),
        SmootherKind::PSpline => {
            let u: Vec<f64> = g.iter().map(|v| (v - g_min) / g_range).collect();
            let poly = DMatrix::from_fn(n, 3, |i, j| u[i].powi(j as i32 + 1));
            let z = DMatrix::from_fn(n, knots.len(), |i, j| tpow(u[i], knots[j]));
            (poly, Some(z))
        }
    }
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Fits `y ~ X_linear theta + f(g)` with the smooth term chosen by `spec`.
pub fn fit_partially_linear(
    spec: &SmootherSpec,
    y: &[f64],
    x_linear: &DMatrix<f64>,
    g: &[f64],
    case_weights: Option<&[f64]>,
) -> Result<SmootherFit> {
    spec.validate()?;
    let n = y.len();
    if x_linear.nrows() != n || g.len() != n {
        return Err(Error::Data(format!(
            "length mismatch: {} responses, {} design rows, {} inputs",
            n,
            x_linear.nrows(),
            g.len()
        )));
    }
    if n == 0 {
        return Err(Error::Data("no observations to fit".into()));
    }
    if y.iter().chain(g).chain(x_linear.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("smoother inputs"));
    }
    let c: Vec<f64> = match case_weights {
        Some(w) if w.len() == n && w.iter().all(|v| *v >= 0.0 && v.is_finite()) => w.to_vec(),
        Some(_) => return Err(Error::Data("case weights must be finite and non-negative".into())),
        None => vec![1.0; n],
    };
    if spec.link == Link::Logit && y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Data("logit link needs a 0/1 response".into()));
    }

    let mut kind = spec.kind;
    let needs_range = matches!(kind, SmootherKind::Gp | SmootherKind::PSpline);
    let rho = match default_rho(g) {
        Ok(r) => r,
        Err(e) if needs_range => {
            warn!("{e}; falling back to a plain linear fit");
            kind = SmootherKind::Plain;
            0.0
        }
        Err(_) => 0.0,
    };
    let g_min = g.iter().copied().fold(f64::INFINITY, f64::min);
    let knots = if kind == SmootherKind::PSpline {
        spline_knots(spec.knots)
    } else {
        Vec::new()
    };
    let (gblock, zblock) = g_blocks(kind, g, g_min, rho, &knots);
    let x = hstack(x_linear, &gblock);
    let kmat = (kind == SmootherKind::Gp).then(|| kernel_matrix(g, rho));
    let penalty = match (&kmat, &zblock) {
        (Some(k), _) => Penalty::Kernel(k),
        (None, Some(z)) => Penalty::Ridge(z),
        _ => Penalty::None,
    };
    let n_eff: f64 = c.iter().sum();
    let yv = DVector::from_column_slice(y);

    let (solved, iterations) = match spec.link {
        Link::Identity => (solve_penalized(&x, &yv, &c, n_eff, &penalty, &spec.lambda_grid)?, 1),
        Link::Logit => {
            let mut eta = DVector::from_iterator(
                n,
                y.iter().map(|&v| {
                    let mu = (v + 0.5) / 2.0;
                    (mu / (1.0 - mu)).ln()
                }),
            );
            let mut last = None;
            let mut iters = 0;
            for it in 0..50 {
                iters = it + 1;
                let mut w = vec![0.0; n];
                let mut z = DVector::zeros(n);
                for i in 0..n {
                    let mu = logistic(eta[i]);
                    let var = (mu * (1.0 - mu)).max(1e-10);
                    w[i] = c[i] * var;
                    z[i] = eta[i] + (y[i] - mu) / var;
                }
                let sol = solve_penalized(&x, &z, &w, n_eff, &penalty, &spec.lambda_grid)?;
                let new_eta = sol.eta.map(|v| v.clamp(-ETA_CLAMP, ETA_CLAMP));
                let delta = (&new_eta - &eta).amax();
                let scale = 1.0 + new_eta.amax();
                eta = new_eta;
                last = Some(sol);
                if delta < 1e-8 * scale {
                    break;
                }
            }
            (last.expect("at least one IRLS step"), iters)
        }
    };

    let p_lin = x_linear.ncols();
    let theta = solved.beta.rows(0, p_lin).clone_owned();
    let g_coef: Vec<f64> = solved.beta.rows(p_lin, gblock.ncols()).iter().copied().collect();
    let fitted: Vec<f64> = match spec.link {
        Link::Identity => solved.eta.iter().copied().collect(),
        Link::Logit => solved.eta.iter().map(|&e| logistic(e)).collect(),
    };
    let rss: f64 = (0..n).map(|i| c[i] * (y[i] - fitted[i]).powi(2)).sum();
    let resid_df = n_eff - solved.edf;
    let sigma2_hat = if resid_df > 0.0 { rss / resid_df } else { 0.0 };
    let dropped: Vec<usize> = solved.dropped.iter().copied().filter(|&j| j < p_lin).collect();
    let v = if kind == SmootherKind::Gp || kind == SmootherKind::PSpline {
        solved.pen
    } else {
        DVector::zeros(0)
    };

    Ok(SmootherFit {
        kind,
        link: spec.link,
        theta,
        g_coef,
        v,
        lambda: solved.lambda,
        rho,
        train_inputs: g.to_vec(),
        knots,
        g_min,
        g_range: rho,
        sigma2_hat,
        edf: solved.edf,
        gcv: solved.gcv,
        gcv_path: solved.path,
        dropped,
        fitted,
        iterations,
    })
}

static UNSEEN_WARNED: AtomicBool = AtomicBool::new(false);

/// Linear predictor at new points.
pub fn predict_link(fit: &SmootherFit, x_linear_new: &DMatrix<f64>, g_new: &[f64]) -> Result<Vec<f64>> {
    let n = g_new.len();
    if x_linear_new.nrows() != n || x_linear_new.ncols() != fit.theta.len() {
        return Err(Error::Data(format!(
            "prediction design is {}x{}, expected {}x{}",
            x_linear_new.nrows(),
            x_linear_new.ncols(),
            n,
            fit.theta.len()
        )));
    }
    if !fit.dropped.is_empty()
        && fit
            .dropped
            .iter()
            .any(|&j| x_linear_new.column(j).iter().any(|v| *v != 0.0))
        && !UNSEEN_WARNED.swap(true, Ordering::Relaxed)
    {
        warn!("prediction rows use a column absent from the training data; its coefficient is 0");
    }
    let mut eta: Vec<f64> = (x_linear_new * &fit.theta).iter().copied().collect();
    match fit.kind {
        SmootherKind::Plain => {}
        SmootherKind::LinearInInversePi => {
            for (e, g) in eta.iter_mut().zip(g_new) {
                *e += fit.g_coef[0] * (-g).exp();
            }
        }
        SmootherKind::Gp => {
            for (e, &g) in eta.iter_mut().zip(g_new) {
                let mut s = fit.g_coef[0] * g;
                for (vi, gi) in fit.v.iter().zip(&fit.train_inputs) {
                    s += vi * matern((g - gi).abs() / fit.rho);
                }
                *e += s;
            }
        }
        SmootherKind::PSpline => {
            for (e, &g) in eta.iter_mut().zip(g_new) {
                let u = (g - fit.g_min) / fit.g_range;
                let mut s = fit.g_coef[0] * u + fit.g_coef[1] * u * u + fit.g_coef[2] * u * u * u;
                for (b, k) in fit.v.iter().zip(&fit.knots) {
                    s += b * tpow(u, *k);
                }
                *e += s;
            }
        }
    }
    Ok(eta)
}

/// Predictions on the response scale.
pub fn predict(fit: &SmootherFit, x_linear_new: &DMatrix<f64>, g_new: &[f64]) -> Result<Vec<f64>> {
    let eta = predict_link(fit, x_linear_new, g_new)?;
    Ok(match fit.link {
        Link::Identity => eta,
        Link::Logit => eta.into_iter().map(|e| logistic(e.clamp(-ETA_CLAMP, ETA_CLAMP))).collect(),
    })
}
