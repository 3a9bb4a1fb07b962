//! Finite populations, sample containers and the synthetic population
//! generator used by the Monte Carlo study.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stage, StreamKey};

/// Target ratio between the largest and smallest PSU selection probability
/// within a stratum.
pub const PSU_SIZE_RATIO: f64 = 30.0;
/// Target correlation between `x` and the log design weight.
pub const X_LOGW_CORRELATION: f64 = 0.5;

/// Shape of the outcome's dependence on `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    Lin,
    Cub,
    Exp,
    Sin,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Lin, Scenario::Cub, Scenario::Exp, Scenario::Sin];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Lin => "LIN",
            Scenario::Cub => "CUB",
            Scenario::Exp => "EXP",
            Scenario::Sin => "SIN",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LIN" => Ok(Scenario::Lin),
            "CUB" => Ok(Scenario::Cub),
            "EXP" => Ok(Scenario::Exp),
            "SIN" => Ok(Scenario::Sin),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Mean function of `x` for each scenario.
pub fn f_scenario(k: Scenario, x: f64) -> f64 {
    match k {
        Scenario::Lin => x,
        Scenario::Cub => (x / 3.0).powi(3),
        Scenario::Exp => (x / 2.0).exp() / 5.0,
        Scenario::Sin => 5.0 * (std::f64::consts::PI * x / 2.0).sin(),
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Selection probabilities `logistic(gamma0 + gamma1 * x)`.
pub fn compute_selection_probs(x: &[f64], gamma0: f64, gamma1: f64) -> Vec<f64> {
    x.iter().map(|&xi| logistic(gamma0 + gamma1 * xi)).collect()
}

/// Finds the intercept that makes the expected Poisson sample size equal
/// `target`. The expected size is strictly increasing in the intercept, so the
/// bisection root is unique.
pub fn calibrate_gamma0(x: &[f64], gamma1: f64, target: f64) -> Result<f64> {
    let n = x.len() as f64;
    if !(target > 0.0 && target < n) {
        return Err(Error::Config(format!(
            "expected sample size {target} must lie strictly between 0 and {n}"
        )));
    }
    let total = |g0: f64| x.iter().map(|&xi| logistic(g0 + gamma1 * xi)).sum::<f64>();
    let tol = 1e-6 * target;

    let (mut lo, mut hi) = (-1.0_f64, 1.0_f64);
    let mut grow = 0;
    while total(lo) > target {
        lo -= 2.0 * (hi - lo);
        grow += 1;
        if grow > 60 {
            return Err(Error::Calibration("no lower bracket for gamma0".into()));
        }
    }
    while total(hi) < target {
        hi += 2.0 * (hi - lo);
        grow += 1;
        if grow > 120 {
            return Err(Error::Calibration("no upper bracket for gamma0".into()));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let s = total(mid);
        if (s - target).abs() <= tol {
            return Ok(mid);
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < f64::EPSILON * mid.abs().max(1.0) {
            break;
        }
    }
    let mid = 0.5 * (lo + hi);
    if (total(mid) - target).abs() <= tol {
        Ok(mid)
    } else {
        Err(Error::Calibration(format!(
            "bisection stalled at gamma0 = {mid} with expected size {}",
            total(mid)
        )))
    }
}

/// Noise scale for `x = -7 + log w + rho * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseScale {
    /// Chosen so that cor(x, log w) = 0.5 in the realized population.
    Calibrated,
    Fixed(f64),
}

/// Parameters of the synthetic population.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationConfig {
    pub n_total: usize,
    pub strata: usize,
    pub clusters_per_stratum: usize,
    pub cluster_size: usize,
    /// Expected size of the non-probability sample.
    pub n_a: f64,
    pub gamma1: f64,
    pub scenario: Scenario,
    pub icc: f64,
    /// Residual variance of the continuous outcome.
    pub sigma2: f64,
    pub noise: NoiseScale,
}

impl PopulationConfig {
    pub fn new(
        n_total: usize,
        strata: usize,
        clusters_per_stratum: usize,
        cluster_size: usize,
        n_a: f64,
        gamma1: f64,
        scenario: Scenario,
    ) -> Self {
        PopulationConfig {
            n_total,
            strata,
            clusters_per_stratum,
            cluster_size,
            n_a,
            gamma1,
            scenario,
            icc: 0.2,
            sigma2: 4.0,
            noise: NoiseScale::Calibrated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let implied = self.strata * self.clusters_per_stratum * self.cluster_size;
        if self.strata == 0 || self.clusters_per_stratum == 0 || self.cluster_size == 0 {
            return Err(Error::Config("population dimensions must be positive".into()));
        }
        if implied != self.n_total {
            return Err(Error::Config(format!(
                "N = {} but H * M_h * N_hj = {implied}",
                self.n_total
            )));
        }
        if self.clusters_per_stratum < 2 {
            return Err(Error::Config(
                "M_h must be at least 2 to reach the PSU size ratio".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.icc) {
            return Err(Error::Config(format!("ICC {} outside [0, 1)", self.icc)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config("residual variance must be positive".into()));
        }
        if !(self.n_a > 0.0 && self.n_a < self.n_total as f64) {
            return Err(Error::Config(format!(
                "n_A = {} must lie strictly between 0 and N",
                self.n_a
            )));
        }
        Ok(())
    }
}

/// Cluster random-effect variance giving the requested ICC for a residual
/// variance `sigma2`.
pub fn random_effect_variance(icc: f64, sigma2: f64) -> f64 {
    icc * sigma2 / (1.0 - icc)
}

/// Latent-scale residual variance of the logistic distribution.
pub const LOGISTIC_LATENT_VARIANCE: f64 = std::f64::consts::PI * std::f64::consts::PI / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignMeta {
    pub strata: usize,
    pub clusters_per_stratum: usize,
    pub cluster_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub id: usize,
    pub stratum: usize,
    /// Global cluster index.
    pub cluster: usize,
    pub x: f64,
    /// Reference design weight, inverse inclusion probability scaled to sum N.
    pub w_ref: f64,
    pub pi_a: f64,
    pub y_cont: f64,
    pub y_bin: u8,
    /// PSU measure of size, `c_h + v1`.
    pub mos_psu: f64,
    /// SSU measure of size, `v2`.
    pub mos_ssu: f64,
}

#[derive(Debug, Clone)]
pub struct FinitePopulation {
    pub units: Vec<UnitRecord>,
    pub design: DesignMeta,
    pub scenario: Scenario,
    pub gamma0: f64,
    pub gamma1: f64,
    pub true_mean_continuous: f64,
    pub true_mean_binary: f64,
    /// Within-stratum PSU selection probabilities, indexed by global cluster.
    pub psu_prob: Vec<f64>,
    /// Noise scale used for `x`.
    pub rho_noise: f64,
    pub sigma2_u: f64,
}

impl FinitePopulation {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Units of global cluster `c`; units are laid out stratum-major.
    pub fn cluster_units(&self, c: usize) -> &[UnitRecord] {
        let size = self.design.cluster_size;
        &self.units[c * size..(c + 1) * size]
    }

    pub fn cluster_count(&self) -> usize {
        self.design.strata * self.design.clusters_per_stratum
    }

    pub fn true_mean(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Continuous => self.true_mean_continuous,
            Outcome::Binary => self.true_mean_binary,
        }
    }

    pub fn outcome(&self, id: usize, outcome: Outcome) -> f64 {
        let u = &self.units[id];
        match outcome {
            Outcome::Continuous => u.y_cont,
            Outcome::Binary => f64::from(u.y_bin),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(out, "id,stratum,cluster,x,w_ref,pi_A,y_cont,y_bin")?;
            for u in &self.units {
                writeln!(
                    out,
                    "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                    u.id, u.stratum, u.cluster, u.x, u.w_ref, u.pi_a, u.y_cont, u.y_bin
                )?;
            }
            out.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// Outcome type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    Continuous,
    Binary,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Continuous => "continuous",
            Outcome::Binary => "binary",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Additive shift `c` so that the PSU sizes `c + v` have max/min equal to
/// `ratio`. When the raw sizes already spread less than `ratio`, `c` is 0 and
/// the sizes are kept as drawn.
pub fn psu_size_shift(v: &[f64], ratio: f64) -> Option<f64> {
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
    if !(vmax > vmin) {
        return None;
    }
    Some(((vmax - ratio * vmin) / (ratio - 1.0)).max(0.0))
}

/// Generates a stratified, clustered population.
///
/// All random draws come from the `Population` stream of `seed` in a fixed
/// order that does not depend on the scenario, so populations generated for
/// different scenarios share their design, covariate and noise draws and
/// differ only through the mean function.
pub fn generate_population(cfg: &PopulationConfig, seed: u64) -> Result<FinitePopulation> {
    cfg.validate()?;
    let h_count = cfg.strata;
    let m_h = cfg.clusters_per_stratum;
    let n_hj = cfg.cluster_size;
    let n = cfg.n_total;
    let clusters = h_count * m_h;
    let mut rng = stream_rng(seed, StreamKey::new(0, 0, 0, Stage::Population));

    // PSU measures of size share one shift, so the largest and smallest
    // across the population differ by the target ratio.
    let mut redraws = 0;
    let mos_psu: Vec<f64> = loop {
        let v: Vec<f64> = (0..clusters).map(|_| Exp1.sample(&mut rng)).collect();
        if let Some(c) = psu_size_shift(&v, PSU_SIZE_RATIO) {
            break v.iter().map(|vi| c + vi).collect();
        }
        redraws += 1;
        if redraws > 100 {
            return Err(Error::Calibration("PSU sizes stayed degenerate".into()));
        }
    };
    let mut psu_prob = vec![0.0; clusters];
    for h in 0..h_count {
        let range = h * m_h..(h + 1) * m_h;
        let total: f64 = mos_psu[range.clone()].iter().sum();
        for c in range {
            psu_prob[c] = mos_psu[c] / total;
        }
    }

    let mos_ssu: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();

    // Weights are the inverse of (PSU probability within the stratum) times
    // (SSU share of v2 within the stratum). The logged covariate and outcome
    // terms use this unscaled weight.
    let units_per_stratum = m_h * n_hj;
    let mut raw_weight = vec![0.0; n];
    for h in 0..h_count {
        let units = h * units_per_stratum..(h + 1) * units_per_stratum;
        let stratum_total: f64 = mos_ssu[units.clone()].iter().sum();
        for i in units {
            raw_weight[i] = 1.0 / (psu_prob[i / n_hj] * mos_ssu[i] / stratum_total);
        }
    }
    let raw_total: f64 = raw_weight.iter().sum();
    let w_ref: Vec<f64> = raw_weight.iter().map(|w| w * n as f64 / raw_total).collect();
    let log_w: Vec<f64> = raw_weight.iter().map(|w| w.ln()).collect();

    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let rho_noise = match cfg.noise {
        NoiseScale::Fixed(r) => r,
        NoiseScale::Calibrated => {
            let mean = log_w.iter().sum::<f64>() / n as f64;
            let var = log_w.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64;
            let r2 = X_LOGW_CORRELATION * X_LOGW_CORRELATION;
            var.sqrt() * (1.0 / r2 - 1.0).sqrt()
        }
    };
    let x: Vec<f64> = (0..n).map(|i| -7.0 + log_w[i] + rho_noise * eps[i]).collect();

    let gamma0 = calibrate_gamma0(&x, cfg.gamma1, cfg.n_a)?;
    let pi_a = compute_selection_probs(&x, gamma0, cfg.gamma1);

    let sigma2_u = random_effect_variance(cfg.icc, cfg.sigma2);
    let sigma_u = sigma2_u.sqrt();
    let sigma_e = cfg.sigma2.sqrt();
    let sigma_ub = random_effect_variance(cfg.icc, LOGISTIC_LATENT_VARIANCE).sqrt();
    let u_cont: Vec<f64> = (0..clusters)
        .map(|_| sigma_u * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let e_cont: Vec<f64> = (0..n)
        .map(|_| sigma_e * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let u_bin: Vec<f64> = (0..clusters)
        .map(|_| sigma_ub * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let unif_bin: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

    let mut units = Vec::with_capacity(n);
    for i in 0..n {
        let cluster = i / n_hj;
        let stratum = cluster / m_h;
        let d = stratum as f64;
        let core = f_scenario(cfg.scenario, x[i]) + log_w[i] - 0.1 * d + 0.2 * x[i] * log_w[i];
        let y_cont = 1.0 + core + u_cont[cluster] + e_cont[i];
        let p_bin = logistic(-7.0 + core + u_bin[cluster]);
        units.push(UnitRecord {
            id: i,
            stratum,
            cluster,
            x: x[i],
            w_ref: w_ref[i],
            pi_a: pi_a[i],
            y_cont,
            y_bin: u8::from(unif_bin[i] < p_bin),
            mos_psu: mos_psu[cluster],
            mos_ssu: mos_ssu[i],
        });
    }
    let true_mean_continuous = units.iter().map(|u| u.y_cont).sum::<f64>() / n as f64;
    let true_mean_binary = units.iter().map(|u| f64::from(u.y_bin)).sum::<f64>() / n as f64;

    Ok(FinitePopulation {
        units,
        design: DesignMeta {
            strata: h_count,
            clusters_per_stratum: m_h,
            cluster_size: n_hj,
        },
        scenario: cfg.scenario,
        gamma0,
        gamma1: cfg.gamma1,
        true_mean_continuous,
        true_mean_binary,
        psu_prob,
        rho_noise,
        sigma2_u,
    })
}

/// A reference-survey row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub unit_id: usize,
    pub stratum: usize,
    /// PSU label, unique across the whole sample.
    pub psu: usize,
    pub weight: f64,
    pub x: Vec<f64>,
}

/// A probability sample drawn under a stratified two-stage design.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilitySample {
    pub rows: Vec<ReferenceRow>,
    /// Sampled PSU labels of each stratum.
    pub psu_per_stratum: BTreeMap<usize, Vec<usize>>,
    /// External stratum names, indexed by stratum.
    pub stratum_labels: Vec<String>,
}

impl ProbabilitySample {
    /// Builds the PSU index from the rows.
    pub fn from_rows(rows: Vec<ReferenceRow>, stratum_labels: Vec<String>) -> Result<Self> {
        let mut psu_per_stratum: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &rows {
            if !(r.weight > 0.0) || !r.weight.is_finite() {
                return Err(Error::Data(format!(
                    "reference unit {} has non-positive weight {}",
                    r.unit_id, r.weight
                )));
            }
            match owner.insert(r.psu, r.stratum) {
                Some(s) if s != r.stratum => {
                    return Err(Error::Data(format!(
                        "PSU {} appears in strata {} and {}",
                        r.psu, s, r.stratum
                    )))
                }
                Some(_) => {}
                None => psu_per_stratum.entry(r.stratum).or_default().push(r.psu),
            }
        }
        Ok(ProbabilitySample {
            rows,
            psu_per_stratum,
            stratum_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Total number of sampled PSUs.
    pub fn psu_count(&self) -> usize {
        self.psu_per_stratum.values().map(Vec::len).sum()
    }

    pub fn strata_count(&self) -> usize {
        self.psu_per_stratum.len()
    }

    pub fn stratum_label(&self, s: usize) -> String {
        self.stratum_labels
            .get(s)
            .cloned()
            .unwrap_or_else(|| s.to_string())
    }

    pub fn write_csv(&self, path: &Path, covariates: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            write!(out, "id,stratum,psu,weight")?;
            for c in covariates {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
            for r in &self.rows {
                write!(
                    out,
                    "{},{},{},{:.16e}",
                    r.unit_id,
                    self.stratum_label(r.stratum),
                    r.psu,
                    r.weight
                )?;
                for v in &r.x {
                    write!(out, ",{v:.16e}")?;
                }
                writeln!(out)?;
            }
            out.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// A non-probability sample row. Design variables are carried when known.
#[derive(Debug, Clone, PartialEq)]
pub struct NonProbRow {
    pub unit_id: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub stratum: Option<usize>,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonProbSample {
    pub rows: Vec<NonProbRow>,
}

impl NonProbSample {
    pub fn new(rows: Vec<NonProbRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("non-probability sample is empty".into()));
        }
        if rows.iter().any(|r| !r.y.is_finite()) {
            return Err(Error::NonFinite("non-probability outcome"));
        }
        Ok(NonProbSample { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn y(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y).collect()
    }

    pub fn write_csv(&self, path: &Path, covariates: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let with_design = self
            .rows
            .iter()
            .all(|r| r.stratum.is_some() && r.weight.is_some());
        let mut emit = || -> std::io::Result<()> {
            write!(out, "id")?;
            for c in covariates {
                write!(out, ",{c}")?;
            }
            write!(out, ",y")?;
            if with_design {
                write!(out, ",stratum,weight")?;
            }
            writeln!(out)?;
            for r in &self.rows {
                write!(out, "{}", r.unit_id)?;
                for v in &r.x {
                    write!(out, ",{v:.16e}")?;
                }
                write!(out, ",{:.16e}", r.y)?;
                if let (true, Some(s), Some(w)) = (with_design, r.stratum, r.weight) {
                    write!(out, ",{s},{w:.16e}")?;
                }
                writeln!(out)?;
            }
            out.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}
