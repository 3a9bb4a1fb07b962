//! Independent reference implementations checked against the library.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use npinfer::estimators::{
    estimate_aipw, estimate_fw, estimate_ipsw, estimate_model_based, estimate_naive, rubin_combine,
    rubin_df,
};
use npinfer::fpbb::polya_synthesize;
use npinfer::glmcore::fit_logistic;
use npinfer::rng::{stream_rng, Stage, StreamKey};
use npinfer::smoothers::{fit_partially_linear, matern_kernel, predict};
use npinfer::{
    BootstrapReplicate, CiReference, EstimateRecord, Link, Method, ReplicateRow, SmootherKind,
    SmootherSpec,
};

fn rng(tag: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(2024, StreamKey::new(tag, 0, 0, Stage::Population))
}

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

#[test]
pub fn matern_identities() {
    for rho in [0.3, 1.0, 7.5] {
        assert!((matern_kernel(0.0, rho).unwrap() - 1.0).abs() < 1e-12);
        assert!((matern_kernel(rho, rho).unwrap() - 2.0 / std::f64::consts::E).abs() < 1e-12);
        assert!((matern_kernel(10.0 * rho, rho).unwrap() - 11.0 * (-10.0f64).exp()).abs() < 1e-12);
    }
    let mut prev = 1.0;
    for i in 1..=1000 {
        let k = matern_kernel(i as f64 * 0.01, 1.0).unwrap();
        assert!(k < prev);
        prev = k;
    }
}

/// Minimizer of `|y - X b - K v|^2 + lambda v'Kv` from its stationarity
/// conditions `X b + (K + lambda I) v = y`, `X'v = 0`, solved by dense LU.
fn dense_gp_solve(x: &DMatrix<f64>, g: &[f64], y: &[f64], lambda: f64) -> (DVector<f64>, DVector<f64>) {
    let n = y.len();
    let p = x.ncols();
    let range = g.iter().copied().fold(f64::MIN, f64::max) - g.iter().copied().fold(f64::MAX, f64::min);
    let mut a = DMatrix::zeros(n + p, n + p);
    let mut rhs = DVector::zeros(n + p);
    for i in 0..n {
        for j in 0..p {
            a[(i, j)] = x[(i, j)];
            a[(n + j, p + i)] = x[(i, j)];
        }
        for k in 0..n {
            let t = (g[i] - g[k]).abs() / range;
            a[(i, p + k)] = (1.0 + t) * (-t).exp() + if i == k { lambda } else { 0.0 };
        }
        rhs[i] = y[i];
    }
    let sol = a.lu().solve(&rhs).expect("nonsingular system");
    (sol.rows(0, p).clone_owned(), sol.rows(p, n).clone_owned())
}

#[test]
pub fn gp_fit_matches_dense_solve() {
    let mut r = rng(1);
    let n = 30;
    let x: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
    let g: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..-1.0)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * x[i] + (2.0 * g[i]).sin() + 0.3 * normal(&mut r))
        .collect();
    let xl = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    for lambda in [0.05, 1.0, 20.0] {
        let spec = SmootherSpec::new(SmootherKind::Gp, Link::Identity).with_grid(vec![lambda]);
        let fit = fit_partially_linear(&spec, &y, &xl, &g, None).unwrap();
        let full = DMatrix::from_fn(n, 3, |i, j| if j < 2 { xl[(i, j)] } else { g[i] });
        let (beta, v) = dense_gp_solve(&full, &g, &y, lambda);
        let scale = 1.0 + beta.amax().max(v.amax());
        assert!((fit.theta[0] - beta[0]).abs() < 1e-6 * scale);
        assert!((fit.theta[1] - beta[1]).abs() < 1e-6 * scale);
        assert!((fit.g_coef[0] - beta[2]).abs() < 1e-6 * scale);
        for i in 0..n {
            assert!((fit.v[i] - v[i]).abs() < 1e-6 * scale, "v[{i}]: {} vs {}", fit.v[i], v[i]);
        }
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-10 {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = f(a);
        }
    }
    0.5 * (lo + hi)
}

#[test]
pub fn logistic_fit_matches_profile_search() {
    let mut r = rng(2);
    let n = 50;
    let x: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let p = 1.0 / (1.0 + (0.5 - 1.2 * xi).exp());
            f64::from(u8::from(r.random::<f64>() < p))
        })
        .collect();
    let loglik = |b0: f64, b1: f64| -> f64 {
        x.iter()
            .zip(&y)
            .map(|(&xi, &yi)| {
                let e = b0 + b1 * xi;
                yi * e - (1.0 + e.exp()).ln()
            })
            .sum()
    };
    let best_b0 = |b1: f64| golden_max(|b0| loglik(b0, b1), -10.0, 10.0);
    let b1 = golden_max(|b1| loglik(best_b0(b1), b1), -10.0, 10.0);
    let b0 = best_b0(b1);

    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let fit = fit_logistic(&design, &y, None).unwrap();
    assert!(fit.converged);
    assert!((fit.beta[0] - b0).abs() < 1e-4, "{} vs {b0}", fit.beta[0]);
    assert!((fit.beta[1] - b1).abs() < 1e-4, "{} vs {b1}", fit.beta[1]);
}

/// A 30-unit population written out unit by unit: the synthetic population
/// is expanded into explicit copies and every estimator is recomputed from
/// the expansion with plain loops.
struct Toy {
    y: Vec<f64>,
    x: Vec<f64>,
    pi: Vec<f64>,
    w: Vec<f64>,
    synth_x: Vec<f64>,
    copies: Vec<u64>,
}

fn toy() -> Toy {
    let mut r = rng(3);
    let n = 30;
    let x: Vec<f64> = (0..n).map(|i| i as f64 / 10.0 - 1.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v + 0.5 * normal(&mut r)).collect();
    let pi: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.6)).collect();
    let w: Vec<f64> = (0..n).map(|_| r.random_range(1.0..9.0)).collect();
    let synth_x: Vec<f64> = (0..12).map(|i| i as f64 / 4.0 - 1.5).collect();
    let copies: Vec<u64> = (0..12).map(|_| r.random_range(1..20)).collect();
    Toy { y, x, pi, w, synth_x, copies }
}

#[test]
pub fn estimators_match_unit_level_reference() {
    let t = toy();
    let line = |v: f64| 1.5 + 2.5 * v;
    let yhat: Vec<f64> = t.x.iter().map(|&v| line(v)).collect();
    let synth_hat: Vec<f64> = t.synth_x.iter().map(|&v| line(v)).collect();
    let mult: Vec<f64> = t.copies.iter().map(|&c| c as f64).collect();

    let mut expanded = Vec::new();
    for (v, &c) in t.synth_x.iter().zip(&t.copies) {
        for _ in 0..c {
            expanded.push(line(*v));
        }
    }
    let big_n = expanded.len() as f64;
    let mut resid = 0.0;
    let mut resid_pi = 0.0;
    for i in 0..t.y.len() {
        resid += t.y[i] - yhat[i];
        resid_pi += (t.y[i] - yhat[i]) / t.pi[i];
    }
    let mut pred = 0.0;
    for v in &expanded {
        pred += v;
    }
    let ref_mb = (resid + pred) / big_n;
    let ref_aipw = (resid_pi + pred) / big_n;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..t.y.len() {
        num += t.y[i] / t.pi[i];
        den += 1.0 / t.pi[i];
    }
    let ref_ipsw = num / den;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..t.y.len() {
        num += t.w[i] * t.y[i];
        den += t.w[i];
    }
    let ref_fw = num / den;
    let mut sum = 0.0;
    for v in &t.y {
        sum += v;
    }
    let ref_naive = sum / t.y.len() as f64;

    let tol = 1e-10;
    assert!((estimate_model_based(&t.y, &yhat, &synth_hat, &mult, big_n).unwrap() - ref_mb).abs() < tol);
    assert!((estimate_aipw(&t.y, &yhat, &t.pi, &synth_hat, &mult, big_n).unwrap() - ref_aipw).abs() < tol);
    assert!((estimate_ipsw(&t.y, &t.pi).unwrap() - ref_ipsw).abs() < tol);
    assert!((estimate_fw(&t.y, &t.w).unwrap() - ref_fw).abs() < tol);
    assert!((estimate_naive(&t.y).unwrap() - ref_naive).abs() < tol);
}

#[test]
pub fn plain_smoother_is_ordinary_least_squares() {
    let t = toy();
    let n = t.y.len();
    let xl = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { t.x[i] });
    let fit = fit_partially_linear(
        &SmootherSpec::new(SmootherKind::Plain, Link::Identity),
        &t.y,
        &xl,
        &vec![0.0; n],
        None,
    )
    .unwrap();
    let xtx = xl.transpose() * &xl;
    let xty = xl.transpose() * DVector::from_column_slice(&t.y);
    let beta = xtx.cholesky().unwrap().solve(&xty);
    assert!((fit.theta[0] - beta[0]).abs() < 1e-10);
    assert!((fit.theta[1] - beta[1]).abs() < 1e-10);
    let at = predict(&fit, &xl, &vec![0.0; n]).unwrap();
    for i in 0..n {
        assert!((at[i] - (beta[0] + beta[1] * t.x[i])).abs() < 1e-10);
    }
}

#[test]
pub fn estimator_equivariance() {
    let t = toy();
    let yhat: Vec<f64> = t.x.iter().map(|&v| 1.0 + v).collect();
    let synth_hat: Vec<f64> = t.synth_x.iter().map(|&v| 1.0 + v).collect();
    let mult: Vec<f64> = t.copies.iter().map(|&c| c as f64).collect();
    let big_n: f64 = mult.iter().sum();
    let c = 3.7;
    let shift = |v: &[f64]| v.iter().map(|a| a + c).collect::<Vec<f64>>();
    let base = estimate_aipw(&t.y, &yhat, &t.pi, &synth_hat, &mult, big_n).unwrap();
    let moved = estimate_aipw(&shift(&t.y), &shift(&yhat), &t.pi, &shift(&synth_hat), &mult, big_n).unwrap();
    assert!((moved - base - c).abs() < 1e-10);
    let base = estimate_ipsw(&t.y, &t.pi).unwrap();
    assert!((estimate_ipsw(&shift(&t.y), &t.pi).unwrap() - base - c).abs() < 1e-10);
    let scaled: Vec<f64> = t.y.iter().map(|a| a * c).collect();
    assert!((estimate_fw(&scaled, &t.w).unwrap() - c * estimate_fw(&t.y, &t.w).unwrap()).abs() < 1e-10);
}

#[test]
pub fn polya_means_follow_weights() {
    let weights = [42.0, 25.0, 15.0, 10.0, 8.0];
    let n_total: u64 = 100;
    let rep = BootstrapReplicate {
        rows: weights
            .iter()
            .enumerate()
            .map(|(i, &w)| ReplicateRow {
                unit_id: i,
                row: i,
                stratum: 0,
                design_weight: w,
                weight: w,
                x: vec![i as f64],
            })
            .collect(),
        n_star: 5,
        n_hat: 100.0,
    };
    let draws = 10_000;
    let mut r = rng(4);
    let mut sum = [0.0; 5];
    let mut sq = [0.0; 5];
    for _ in 0..draws {
        let s = polya_synthesize(&rep, n_total, (0, 0), &mut r).unwrap();
        assert_eq!(s.total, n_total);
        for row in &s.rows {
            let m = row.multiplicity as f64;
            sum[row.unit_id] += m;
            sq[row.unit_id] += m * m;
        }
    }
    for i in 0..5 {
        let mean = sum[i] / draws as f64;
        let var = sq[i] / draws as f64 - mean * mean;
        let se = (var / draws as f64).sqrt();
        assert!((mean - weights[i]).abs() < 3.0 * se, "unit {i}: {mean} vs {} (se {se})", weights[i]);
    }
}

fn records(values: &[f64], l: usize) -> Vec<EstimateRecord> {
    values
        .iter()
        .enumerate()
        .map(|(i, &value)| EstimateRecord { method: Method::Gppp, b: i / l, l: i % l, value, n_used: 1 })
        .collect()
}

#[test]
pub fn rubin_worked_example() {
    let c = rubin_combine(&records(&[1.0, 3.0], 1), 2, 1, 4, 2, CiReference::StudentT).unwrap();
    assert_eq!(c.point, 2.0);
    assert_eq!(c.variance, 3.0);
    assert_eq!(rubin_df(100, 50, 50), 49);
    let flat = rubin_combine(&records(&[5.0; 6], 2), 3, 2, 10, 5, CiReference::Normal).unwrap();
    assert_eq!((flat.point, flat.variance, flat.ci_low, flat.ci_high), (5.0, 0.0, 5.0, 5.0));
}
