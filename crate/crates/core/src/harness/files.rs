//! Estimation and synthesis on user-supplied CSV files.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use tracing::info;

use crate::error::{Error, Result};
use crate::estimators::CombinedEstimate;
use crate::harness::config::EstimateConfig;
use crate::harness::pipeline::{
    reference_replicate, run_pipeline, synthesize_cell, PipelineSpec, Response, Slot,
};
use crate::popmodel::{NonProbRow, NonProbSample, Outcome, ProbabilitySample, ReferenceRow};

const REFERENCE_DESIGN_COLUMNS: [&str; 4] = ["id", "stratum", "psu", "weight"];

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv { path: path.display().to_string(), source }
}

struct Table {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut seen = BTreeSet::new();
        for h in &headers {
            if !seen.insert(h) {
                return Err(Error::Data(format!("{}: duplicate column `{h}`", path.display())));
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            return Err(Error::Data(format!("{}: no data rows", path.display())));
        }
        Ok(Table { path: path.to_path_buf(), headers, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.column(name).ok_or_else(|| {
            Error::Data(format!("{}: missing column `{name}`", self.path.display()))
        })
    }

    fn text(&self, row: usize, col: usize) -> Result<&str> {
        let v = self.rows[row][col].as_str();
        if v.is_empty() || v.eq_ignore_ascii_case("na") || v.eq_ignore_ascii_case("nan") {
            return Err(Error::Data(format!(
                "{}: missing value in column `{}` on data row {}",
                self.path.display(),
                self.headers[col],
                row + 1
            )));
        }
        Ok(v)
    }

    fn real(&self, row: usize, col: usize) -> Result<f64> {
        let v = self.text(row, col)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(Error::Data(format!(
                "{}: `{v}` in column `{}` on data row {} is not a finite number",
                self.path.display(),
                self.headers[col],
                row + 1
            ))),
        }
    }

    fn ids(&self) -> Result<Vec<usize>> {
        let ids: Vec<usize> = match self.column("id") {
            None => (0..self.rows.len()).collect(),
            Some(c) => (0..self.rows.len())
                .map(|i| {
                    let v = self.text(i, c)?;
                    v.parse().map_err(|_| {
                        Error::Data(format!("{}: id `{v}` is not a non-negative integer", self.path.display()))
                    })
                })
                .collect::<Result<_>>()?,
        };
        let distinct: BTreeSet<usize> = ids.iter().copied().collect();
        if distinct.len() != ids.len() {
            return Err(Error::Data(format!("{}: duplicate ids", self.path.display())));
        }
        Ok(ids)
    }
}

/// A reference sample read from CSV, with the stratum label lookup.
#[derive(Debug, Clone)]
pub struct ReferenceFile {
    pub sample: ProbabilitySample,
    pub covariates: Vec<String>,
    strata: HashMap<String, usize>,
}

impl ReferenceFile {
    pub fn stratum_index(&self, label: &str) -> Option<usize> {
        self.strata.get(label).copied()
    }
}

/// Reads a reference sample; `covariates = None` takes every non-design
/// column. Strata and PSUs are numbered in order of first appearance.
pub fn read_reference(path: &Path, covariates: Option<&[String]>) -> Result<ReferenceFile> {
    let t = Table::read(path)?;
    let (sc, pc, wc) = (t.require("stratum")?, t.require("psu")?, t.require("weight")?);
    let covariates: Vec<String> = match covariates {
        Some(c) => c.to_vec(),
        None => t
            .headers
            .iter()
            .filter(|h| !REFERENCE_DESIGN_COLUMNS.contains(&h.as_str()))
            .cloned()
            .collect(),
    };
    if covariates.is_empty() {
        return Err(Error::Data(format!("{}: no covariate columns", path.display())));
    }
    let cov_cols: Vec<usize> = covariates.iter().map(|c| t.require(c)).collect::<Result<_>>()?;
    let ids = t.ids()?;
    let mut strata: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut psus: HashMap<(usize, String), usize> = HashMap::new();
    let mut rows = Vec::with_capacity(t.rows.len());
    for i in 0..t.rows.len() {
        let label = t.text(i, sc)?.to_string();
        let next = strata.len();
        let stratum = *strata.entry(label.clone()).or_insert_with(|| {
            labels.push(label);
            next
        });
        let next = psus.len();
        let psu = *psus.entry((stratum, t.text(i, pc)?.to_string())).or_insert(next);
        let x = cov_cols.iter().map(|&c| t.real(i, c)).collect::<Result<Vec<f64>>>()?;
        rows.push(ReferenceRow { unit_id: ids[i], stratum, psu, weight: t.real(i, wc)?, x });
    }
    let sample = ProbabilitySample::from_rows(rows, labels)?;
    Ok(ReferenceFile { sample, covariates, strata })
}

/// Reads the non-probability sample. Optional `stratum` and `weight`
/// columns feed the prediction model when present.
pub fn read_sample(
    path: &Path,
    reference: &ReferenceFile,
    outcome_column: &str,
    outcome: Outcome,
) -> Result<NonProbSample> {
    let t = Table::read(path)?;
    let cov_cols: Vec<usize> = reference
        .covariates
        .iter()
        .map(|c| t.require(c))
        .collect::<Result<_>>()?;
    let yc = t.require(outcome_column)?;
    let sc = t.column("stratum");
    let wc = t.column("weight");
    let ids = t.ids()?;
    let mut rows = Vec::with_capacity(t.rows.len());
    for i in 0..t.rows.len() {
        let y = t.real(i, yc)?;
        if outcome == Outcome::Binary && y != 0.0 && y != 1.0 {
            return Err(Error::Data(format!(
                "{}: binary outcome must be 0 or 1, got {y} on data row {}",
                path.display(),
                i + 1
            )));
        }
        let stratum = match sc {
            None => None,
            Some(c) => {
                let label = t.text(i, c)?;
                Some(reference.stratum_index(label).ok_or_else(|| {
                    Error::Data(format!(
                        "{}: stratum `{label}` does not occur in the reference sample",
                        path.display()
                    ))
                })?)
            }
        };
        let weight = match wc {
            None => None,
            Some(c) => Some(t.real(i, c)?),
        };
        rows.push(NonProbRow {
            unit_id: ids[i],
            x: cov_cols.iter().map(|&c| t.real(i, c)).collect::<Result<_>>()?,
            y,
            stratum,
            weight,
        });
    }
    NonProbSample::new(rows)
}

pub const ESTIMATE_HEADER: &str = "method,qr_spec,pm_spec,point,variance,ci_low,ci_high,df,failed_cells";

/// Runs the estimators once on the two files and writes `estimates.csv`.
pub fn run_estimate(
    reference: &Path,
    sample: &Path,
    cfg: &EstimateConfig,
    out_dir: &Path,
) -> Result<Vec<(Slot, Option<CombinedEstimate>)>> {
    let rf = read_reference(reference, Some(&cfg.covariates))?;
    let sa = read_sample(sample, &rf, &cfg.outcome_column, cfg.outcome)?;
    let has_strata = sa.rows.iter().all(|r| r.stratum.is_some());
    let has_weight = sa.rows.iter().all(|r| r.weight.is_some());
    let spec = PipelineSpec {
        b: cfg.b,
        l: cfg.l,
        methods: cfg.methods.clone(),
        qr_specs: cfg.qr_specs.clone(),
        pm_specs: cfg.pm_specs.clone(),
        ignore_design: cfg.ignore_design,
        n_total: cfg.n_total,
        ci_reference: cfg.ci_reference,
        pm_strata: has_strata.then(|| rf.sample.strata_count()),
        pm_use_weight: has_weight,
        seed: cfg.seed,
    };
    let response = Response {
        scenario: None,
        outcome: cfg.outcome,
        y_sample: sa.y(),
        y_reference: None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let out = pool.install(|| run_pipeline(&sa, &rf.sample, &[response], None, &spec, 0))?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("estimates.csv");
    let mut text = format!("{ESTIMATE_HEADER}\n");
    for ((slot, est), failed) in out.slots.iter().zip(&out.estimates).zip(&out.failed_cells) {
        let (p, v, lo, hi, df) = match est {
            Some(e) => (e.point, e.variance, e.ci_low, e.ci_high, e.df.to_string()),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, "NaN".into()),
        };
        text.push_str(&format!(
            "{},{},{},{p:.16e},{v:.16e},{lo:.16e},{hi:.16e},{df},{failed}\n",
            slot.method,
            slot.qr_label(),
            slot.pm_label()
        ));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(out.slots.into_iter().zip(out.estimates).collect())
}

/// Writes `B x L` synthetic populations as `synth_b{b}_l{l}.csv`.
pub fn run_synthesize(
    reference: &Path,
    n_total: u64,
    b: usize,
    l: usize,
    seed: u64,
    ignore_design: bool,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if b == 0 || l == 0 {
        return Err(Error::Config("need at least one replicate and one synthesis".into()));
    }
    let rf = read_reference(reference, None)?;
    let spec = PipelineSpec {
        b,
        l,
        methods: Vec::new(),
        qr_specs: Vec::new(),
        pm_specs: Vec::new(),
        ignore_design,
        n_total: Some(n_total),
        ci_reference: Default::default(),
        pm_strata: None,
        pm_use_weight: false,
        seed,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(b * l);
    for bi in 0..b {
        let (rep, size) = reference_replicate(&rf.sample, &spec, 0, bi)?;
        for li in 0..l {
            let synth = synthesize_cell(&rep, size, &spec, 0, bi, li)?;
            let path = out_dir.join(format!("synth_b{bi}_l{li}.csv"));
            synth.write_csv(&path, &rf.covariates)?;
            written.push(path);
        }
    }
    info!(files = written.len(), "synthetic populations written");
    Ok(written)
}
