//! Strict `key = value` configuration files with optional `[section]`
//! headers. Section names are free-form; keys are global and each may appear
//! once. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{CiReference, Method};
use crate::glmcore::QrDesign;
use crate::harness::design::PmDesign;
use crate::popmodel::{Outcome, Scenario};

/// Parsed key/value pairs with the line each came from.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(Error::Config(format!("line {lineno}: malformed section header")));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`")))?;
            let key = k.trim().to_string();
            let value = v.trim().trim_matches('"').to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty key")));
            }
            if let Some((_, first)) = entries.insert(key.clone(), (value, lineno)) {
                return Err(Error::Config(format!(
                    "line {lineno}: key `{key}` already set on line {first}"
                )));
            }
        }
        Ok(RawConfig { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn check_known(&self, allowed: &[&str]) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!("line {line}: unknown key `{k}`")));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T> {
        value.parse().map_err(|_| {
            Error::Config(format!("key `{key}`: cannot parse `{value}`"))
        })
    }

    fn count(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        self.parse_as(key, v)
    }

    fn count_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(v) => self.parse_as(key, v),
            None => Ok(default),
        }
    }

    fn real_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(v) => self.parse_as(key, v),
            None => Ok(default),
        }
    }

    fn flag_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key).map(str::to_ascii_lowercase).as_deref() {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(other) => Err(Error::Config(format!("key `{key}`: expected a boolean, got `{other}`"))),
        }
    }

    fn list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key).map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
    }
}

fn parse_specs<T: Copy>(value: Option<&str>, key: &str, t: T, f: T) -> Result<Vec<T>> {
    match value.map(|v| v.trim().to_ascii_lowercase()).as_deref() {
        None | Some("true") => Ok(vec![t]),
        Some("false") => Ok(vec![f]),
        Some("both") => Ok(vec![t, f]),
        Some(other) => Err(Error::Config(format!(
            "key `{key}` must be true, false or both, got `{other}`"
        ))),
    }
}

/// Expands method names; `UW` and `FW` stand for both samples' versions.
pub fn parse_methods(items: &[String]) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for item in items {
        let expanded: Vec<Method> = match item.to_ascii_uppercase().as_str() {
            "ALL" => Method::ALL.to_vec(),
            "UW" => vec![Method::UwR, Method::UwA],
            "FW" => vec![Method::FwR, Method::FwA],
            "DR" => Method::DOUBLY_ROBUST.to_vec(),
            _ => vec![item.parse()?],
        };
        for m in expanded {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    out.sort();
    Ok(out)
}

fn parse_outcomes(value: Option<&str>) -> Result<Vec<Outcome>> {
    match value.map(|v| v.trim().to_ascii_lowercase()).as_deref() {
        None | Some("continuous") => Ok(vec![Outcome::Continuous]),
        Some("binary") => Ok(vec![Outcome::Binary]),
        Some("both") => Ok(vec![Outcome::Continuous, Outcome::Binary]),
        Some(other) => Err(Error::Config(format!(
            "outcome must be continuous, binary or both, got `{other}`"
        ))),
    }
}

fn parse_ci(value: Option<&str>) -> Result<CiReference> {
    value.map_or(Ok(CiReference::StudentT), str::parse)
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub const SIM_KEYS: &[&str] = &[
    "N", "H", "M_h", "N_hj", "n_A", "n_R", "m_h", "n_hj", "gamma1", "icc", "scenarios",
    "outcome", "B", "L", "K", "methods", "qr_spec", "pm_spec", "ignore_design", "seed",
    "workers", "ci_reference",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub n_total: usize,
    pub strata: usize,
    pub clusters_per_stratum: usize,
    pub cluster_size: usize,
    pub n_a: usize,
    pub n_r: usize,
    pub m_h: usize,
    pub n_hj: usize,
    pub gamma1: f64,
    pub icc: f64,
    #[serde(serialize_with = "ser_display_list")]
    pub scenarios: Vec<Scenario>,
    #[serde(serialize_with = "ser_display_list")]
    pub outcomes: Vec<Outcome>,
    pub b: usize,
    pub l: usize,
    pub k: usize,
    #[serde(serialize_with = "ser_display_list")]
    pub methods: Vec<Method>,
    #[serde(serialize_with = "ser_qr")]
    pub qr_specs: Vec<QrDesign>,
    #[serde(serialize_with = "ser_pm")]
    pub pm_specs: Vec<PmDesign>,
    pub ignore_design: bool,
    pub seed: u64,
    pub workers: usize,
    #[serde(serialize_with = "ser_ci")]
    pub ci_reference: CiReference,
}

fn ser_display_list<S: serde::Serializer, T: std::fmt::Display>(v: &[T], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.to_string()))
}

fn ser_qr<S: serde::Serializer>(v: &[QrDesign], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.as_str()))
}

fn ser_pm<S: serde::Serializer>(v: &[PmDesign], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.as_str()))
}

fn ser_ci<S: serde::Serializer>(v: &CiReference, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(v.as_str())
}

impl SimConfig {
    /// The desk-scale profile used for acceptance runs.
    pub fn desk() -> Self {
        SimConfig {
            n_total: 5_000,
            strata: 20,
            clusters_per_stratum: 10,
            cluster_size: 25,
            n_a: 250,
            n_r: 200,
            m_h: 2,
            n_hj: 5,
            gamma1: 0.3,
            icc: 0.2,
            scenarios: vec![Scenario::Lin],
            outcomes: vec![Outcome::Continuous],
            b: 20,
            l: 5,
            k: 200,
            methods: Method::ALL.to_vec(),
            qr_specs: vec![QrDesign::True],
            pm_specs: vec![PmDesign::True],
            ignore_design: false,
            seed: 1,
            workers: default_workers(),
            ci_reference: CiReference::StudentT,
        }
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        raw.check_known(SIM_KEYS)?;
        let scenarios = match raw.list("scenarios") {
            Some(items) => items.iter().map(|s| s.parse()).collect::<Result<Vec<Scenario>>>()?,
            None => vec![Scenario::Lin],
        };
        let methods = match raw.list("methods") {
            Some(items) => parse_methods(&items)?,
            None => Method::ALL.to_vec(),
        };
        let cfg = SimConfig {
            n_total: raw.count("N")?,
            strata: raw.count("H")?,
            clusters_per_stratum: raw.count("M_h")?,
            cluster_size: raw.count("N_hj")?,
            n_a: raw.count("n_A")?,
            n_r: raw.count("n_R")?,
            m_h: raw.count("m_h")?,
            n_hj: raw.count("n_hj")?,
            gamma1: raw.real_or("gamma1", 0.3)?,
            icc: raw.real_or("icc", 0.2)?,
            scenarios,
            outcomes: parse_outcomes(raw.get("outcome"))?,
            b: raw.count_or("B", 50)?,
            l: raw.count_or("L", 10)?,
            k: raw.count_or("K", 1)?,
            methods,
            qr_specs: parse_specs(raw.get("qr_spec"), "qr_spec", QrDesign::True, QrDesign::Misspecified)?,
            pm_specs: parse_specs(raw.get("pm_spec"), "pm_spec", PmDesign::True, PmDesign::Misspecified)?,
            ignore_design: raw.flag_or("ignore_design", false)?,
            seed: raw.get("seed").map_or(Ok(1), |v| raw.parse_as("seed", v))?,
            workers: raw.count_or("workers", default_workers())?,
            ci_reference: parse_ci(raw.get("ci_reference"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_raw(&RawConfig::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let implied = self.strata * self.clusters_per_stratum * self.cluster_size;
        if implied != self.n_total {
            return Err(Error::Config(format!(
                "N = {} but H * M_h * N_hj = {implied}",
                self.n_total
            )));
        }
        if self.strata * self.m_h * self.n_hj != self.n_r {
            return Err(Error::Config(format!(
                "n_R = {} but H * m_h * n_hj = {}",
                self.n_r,
                self.strata * self.m_h * self.n_hj
            )));
        }
        if self.m_h < 2 || self.m_h > self.clusters_per_stratum {
            return Err(Error::Config(format!("m_h = {} must lie in [2, M_h]", self.m_h)));
        }
        if self.n_hj == 0 || self.n_hj > self.cluster_size {
            return Err(Error::Config(format!("n_hj = {} must lie in [1, N_hj]", self.n_hj)));
        }
        if self.n_a == 0 || self.n_a >= self.n_total {
            return Err(Error::Config("n_A must lie strictly between 0 and N".into()));
        }
        if self.b < 2 || self.l < 1 || self.k < 1 {
            return Err(Error::Config("need B >= 2, L >= 1 and K >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.icc) {
            return Err(Error::Config("icc must lie in [0, 1)".into()));
        }
        if !self.gamma1.is_finite() {
            return Err(Error::Config("gamma1 must be finite".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios selected".into()));
        }
        Ok(())
    }

    /// Config file text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(", ");
        let spec = |n: usize, first: &str| match n {
            2 => "both".to_string(),
            _ => first.to_string(),
        };
        format!(
            "[population]\nN = {}\nH = {}\nM_h = {}\nN_hj = {}\ngamma1 = {}\nicc = {}\n\n\
             [samples]\nn_A = {}\nn_R = {}\nm_h = {}\nn_hj = {}\n\n\
             [simulation]\nscenarios = {}\noutcome = {}\nB = {}\nL = {}\nK = {}\nmethods = {}\n\
             qr_spec = {}\npm_spec = {}\nignore_design = {}\nseed = {}\nworkers = {}\nci_reference = {}\n",
            self.n_total,
            self.strata,
            self.clusters_per_stratum,
            self.cluster_size,
            self.gamma1,
            self.icc,
            self.n_a,
            self.n_r,
            self.m_h,
            self.n_hj,
            join(self.scenarios.iter().map(|s| s.to_string()).collect()),
            match self.outcomes.as_slice() {
                [Outcome::Continuous] => "continuous",
                [Outcome::Binary] => "binary",
                _ => "both",
            },
            self.b,
            self.l,
            self.k,
            join(self.methods.iter().map(|m| m.to_string()).collect()),
            spec(self.qr_specs.len(), self.qr_specs[0].as_str()),
            spec(self.pm_specs.len(), self.pm_specs[0].as_str()),
            self.ignore_design,
            self.seed,
            self.workers,
            self.ci_reference.as_str(),
        )
    }
}

pub const ESTIMATE_KEYS: &[&str] = &[
    "N", "covariates", "outcome_column", "outcome", "B", "L", "methods", "qr_spec", "pm_spec",
    "ignore_design", "seed", "workers", "ci_reference",
];

/// Settings for running the estimator on user-supplied files.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateConfig {
    /// Known population size; estimated from the reference weights if absent.
    pub n_total: Option<u64>,
    pub covariates: Vec<String>,
    pub outcome_column: String,
    pub outcome: Outcome,
    pub b: usize,
    pub l: usize,
    pub methods: Vec<Method>,
    pub qr_specs: Vec<QrDesign>,
    pub pm_specs: Vec<PmDesign>,
    pub ignore_design: bool,
    pub seed: u64,
    pub workers: usize,
    pub ci_reference: CiReference,
}

impl EstimateConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        raw.check_known(ESTIMATE_KEYS)?;
        let covariates = raw
            .list("covariates")
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Config("missing required key `covariates`".into()))?;
        let methods = match raw.list("methods") {
            Some(items) => parse_methods(&items)?,
            None => vec![Method::UwA, Method::Ipsw, Method::Gppp, Method::Pspp, Method::Lwp, Method::Aipw],
        };
        for m in &methods {
            if matches!(m, Method::UwR | Method::FwR | Method::FwA) {
                return Err(Error::Config(format!(
                    "method {m} needs quantities that are unavailable outside simulation"
                )));
            }
        }
        let outcomes = parse_outcomes(raw.get("outcome"))?;
        if outcomes.len() != 1 {
            return Err(Error::Config("estimate mode takes a single outcome type".into()));
        }
        let cfg = EstimateConfig {
            n_total: match raw.get("N") {
                Some(v) => Some(raw.parse_as("N", v)?),
                None => None,
            },
            covariates,
            outcome_column: raw.get("outcome_column").unwrap_or("y").to_string(),
            outcome: outcomes[0],
            b: raw.count_or("B", 50)?,
            l: raw.count_or("L", 10)?,
            methods,
            qr_specs: parse_specs(raw.get("qr_spec"), "qr_spec", QrDesign::True, QrDesign::Misspecified)?,
            pm_specs: parse_specs(raw.get("pm_spec"), "pm_spec", PmDesign::True, PmDesign::Misspecified)?,
            ignore_design: raw.flag_or("ignore_design", false)?,
            seed: raw.get("seed").map_or(Ok(1), |v| raw.parse_as("seed", v))?,
            workers: raw.count_or("workers", default_workers())?,
            ci_reference: parse_ci(raw.get("ci_reference"))?,
        };
        if cfg.b < 2 || cfg.l < 1 {
            return Err(Error::Config("need B >= 2 and L >= 1".into()));
        }
        if cfg.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_raw(&RawConfig::read(path)?)
    }
}
