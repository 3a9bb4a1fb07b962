//! Monte Carlo simulation over scenarios, outcomes and model specifications.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::harness::config::SimConfig;
use crate::harness::pipeline::{run_pipeline, slots, PipelineSpec, Response};
use crate::metrics::{compute_metrics, IterationEstimate, MetricsRow};
use crate::popmodel::{
    generate_population, FinitePopulation, NonProbSample, Outcome, PopulationConfig,
    ProbabilitySample,
};
use crate::rng::{stream_seed, Stage, StreamKey, DERIVATION};
use crate::samplers::{draw_poisson_sample, draw_reference_sample};

pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const COMPLETED_FILE: &str = "completed.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ESTIMATES_HEADER: &str =
    "iteration,scenario,outcome,qr_spec,pm_spec,method,point,variance,ci_low,ci_high,df,truth";
pub const SUMMARY_HEADER: &str = "method,scenario,qr_spec,pm_spec,gamma1,rbias,rmse,crci,rlci,rse,k";

/// Summary file for an outcome type.
pub fn summary_file(outcome: Outcome) -> &'static str {
    match outcome {
        Outcome::Continuous => "summary.csv",
        Outcome::Binary => "summary_binary.csv",
    }
}

/// One population per scenario; all share covariates, weights and
/// selection probabilities.
pub fn build_populations(cfg: &SimConfig) -> Result<Vec<FinitePopulation>> {
    cfg.scenarios
        .iter()
        .map(|&s| {
            let mut pc = PopulationConfig::new(
                cfg.n_total,
                cfg.strata,
                cfg.clusters_per_stratum,
                cfg.cluster_size,
                cfg.n_a as f64,
                cfg.gamma1,
                s,
            );
            pc.icc = cfg.icc;
            generate_population(&pc, cfg.seed)
        })
        .collect()
}

/// Reference and non-probability samples of iteration `k`. The sample's `y`
/// is the first population's continuous outcome.
pub fn draw_samples(
    cfg: &SimConfig,
    pops: &[FinitePopulation],
    k: usize,
) -> Result<(ProbabilitySample, NonProbSample)> {
    let pop = &pops[0];
    let mut rng = crate::rng::stream_rng(cfg.seed, StreamKey::new(k, 0, 0, Stage::ReferenceSample));
    let sr = draw_reference_sample(pop, cfg.m_h, cfg.n_hj, &mut rng)?;
    let mut rng = crate::rng::stream_rng(cfg.seed, StreamKey::new(k, 0, 0, Stage::NonProbSample));
    let sa = draw_poisson_sample(pop, Outcome::Continuous, &mut rng)?;
    Ok((sr, sa))
}

pub fn pipeline_spec(cfg: &SimConfig) -> PipelineSpec {
    PipelineSpec {
        b: cfg.b,
        l: cfg.l,
        methods: cfg.methods.clone(),
        qr_specs: cfg.qr_specs.clone(),
        pm_specs: cfg.pm_specs.clone(),
        ignore_design: cfg.ignore_design,
        n_total: Some(cfg.n_total as u64),
        ci_reference: cfg.ci_reference,
        pm_strata: Some(cfg.strata),
        pm_use_weight: true,
        seed: cfg.seed,
    }
}

/// Responses in output order: scenario-major, then outcome.
fn responses(
    cfg: &SimConfig,
    pops: &[FinitePopulation],
    sr: &ProbabilitySample,
    sa: &NonProbSample,
) -> Vec<(Response, f64)> {
    let mut out = Vec::new();
    for pop in pops {
        for &outcome in &cfg.outcomes {
            let response = Response {
                scenario: Some(pop.scenario),
                outcome,
                y_sample: sa.rows.iter().map(|r| pop.outcome(r.unit_id, outcome)).collect(),
                y_reference: Some(sr.rows.iter().map(|r| pop.outcome(r.unit_id, outcome)).collect()),
            };
            out.push((response, pop.true_mean(outcome)));
        }
    }
    out
}

/// Estimates of one iteration as CSV lines, in slot order.
pub fn run_iteration(cfg: &SimConfig, pops: &[FinitePopulation], k: usize) -> Result<Vec<String>> {
    let (sr, sa) = draw_samples(cfg, pops, k)?;
    let resp = responses(cfg, pops, &sr, &sa);
    let pi_true: Vec<f64> = sa.rows.iter().map(|r| pops[0].units[r.unit_id].pi_a).collect();
    let responses_only: Vec<Response> = resp.iter().map(|(r, _)| r.clone()).collect();
    let spec = pipeline_spec(cfg);
    let out = run_pipeline(&sa, &sr, &responses_only, Some(&pi_true), &spec, k)?;
    let mut lines = Vec::with_capacity(out.slots.len());
    for (slot, est) in out.slots.iter().zip(&out.estimates) {
        let (r, truth) = &resp[slot.response];
        let scenario = r.scenario.map_or("na", |s| s.as_str());
        let (point, variance, lo, hi, df) = match est {
            Some(e) => (e.point, e.variance, e.ci_low, e.ci_high, e.df.to_string()),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, "NaN".to_string()),
        };
        lines.push(format!(
            "{k},{scenario},{},{},{},{},{point:.16e},{variance:.16e},{lo:.16e},{hi:.16e},{df},{truth:.16e}",
            r.outcome,
            slot.qr_label(),
            slot.pm_label(),
            slot.method,
        ));
    }
    Ok(lines)
}

/// Number of estimate rows each iteration produces.
pub fn rows_per_iteration(cfg: &SimConfig) -> usize {
    slots(&pipeline_spec(cfg), cfg.scenarios.len() * cfg.outcomes.len()).len()
}

fn read_completed(path: &Path) -> Result<BTreeSet<usize>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut done = BTreeSet::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        done.insert(
            t.parse()
                .map_err(|_| Error::Data(format!("corrupt completion marker `{t}`")))?,
        );
    }
    Ok(done)
}

/// Drops rows of iterations without a completion marker.
fn truncate_to_completed(path: &Path, done: &BTreeSet<usize>) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::with_capacity(text.len());
    kept.push_str(ESTIMATES_HEADER);
    kept.push('\n');
    // A torn final line has no newline yet.
    let whole = &text[..text.rfind('\n').map_or(0, |p| p + 1)];
    for line in whole.lines().skip(1) {
        let k: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
        if k.is_some_and(|k| done.contains(&k)) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
struct IterationSeeds {
    iteration: usize,
    reference_sample: u64,
    nonprob_sample: u64,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    software: &'static str,
    version: &'static str,
    config: &'a SimConfig,
    seed_derivation: &'static str,
    population_seed: u64,
    iteration_seeds: Vec<IterationSeeds>,
    rows_per_iteration: usize,
    iterations_completed: usize,
    iterations_resumed: usize,
    elapsed_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub out_dir: PathBuf,
    /// Per-outcome summaries keyed by slot labels.
    pub summaries: BTreeMap<Outcome, Vec<SummaryRow>>,
    pub iterations_run: usize,
    pub iterations_resumed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub scenario: String,
    pub qr_spec: String,
    pub pm_spec: String,
    pub metrics: MetricsRow,
}

impl SimulationReport {
    pub fn find(&self, outcome: Outcome, method: &str, scenario: &str, qr: &str, pm: &str) -> Option<&MetricsRow> {
        self.summaries.get(&outcome)?.iter().find_map(|r| {
            (r.method == method && r.scenario == scenario && r.qr_spec == qr && r.pm_spec == pm)
                .then_some(&r.metrics)
        })
    }
}

fn config_fingerprint(cfg: &SimConfig) -> String {
    let mut c = cfg.clone();
    c.workers = 1;
    c.to_text()
}

/// Runs or resumes a simulation in `out_dir`.
pub fn run_simulation(cfg: &SimConfig, out_dir: &Path) -> Result<SimulationReport> {
    cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    let estimates_path = out_dir.join(ESTIMATES_FILE);
    let completed_path = out_dir.join(COMPLETED_FILE);

    let fingerprint = config_fingerprint(cfg);
    if config_path.exists() {
        let previous = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        if previous != fingerprint {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration",
                out_dir.display()
            )));
        }
    } else {
        fs::write(&config_path, &fingerprint).map_err(|e| Error::io(&config_path, e))?;
        let _ = fs::remove_file(&completed_path);
        let _ = fs::remove_file(&estimates_path);
    }
    let done = read_completed(&completed_path)?;
    let resumed = done.len();
    if resumed > 0 {
        info!(iterations = resumed, "resuming; completed iterations are skipped");
    }
    truncate_to_completed(&estimates_path, &done)?;
    if !estimates_path.exists() {
        fs::write(&estimates_path, format!("{ESTIMATES_HEADER}\n")).map_err(|e| Error::io(&estimates_path, e))?;
    }

    let pops = build_populations(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let todo: Vec<usize> = (0..cfg.k).filter(|k| !done.contains(k)).collect();
    let open_append = |p: &Path| {
        OpenOptions::new()
            .append(true)
            .open(p)
            .map(BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    let wave = cfg.workers.max(1) * 2;
    for chunk in todo.chunks(wave) {
        let results: Vec<Result<Vec<String>>> =
            pool.install(|| chunk.par_iter().map(|&k| run_iteration(cfg, &pops, k)).collect());
        for (&k, lines) in chunk.iter().zip(results) {
            let lines = lines?;
            let mut est = open_append(&estimates_path)?;
            for line in &lines {
                writeln!(est, "{line}").map_err(|e| Error::io(&estimates_path, e))?;
            }
            est.flush().map_err(|e| Error::io(&estimates_path, e))?;
            drop(est);
            let mut marker = open_append(&completed_path).or_else(|_| {
                File::create(&completed_path)
                    .map(BufWriter::new)
                    .map_err(|e| Error::io(&completed_path, e))
            })?;
            writeln!(marker, "{k}").map_err(|e| Error::io(&completed_path, e))?;
            marker.flush().map_err(|e| Error::io(&completed_path, e))?;
            info!(iteration = k, "iteration complete");
        }
    }

    let summaries = write_summaries(cfg, out_dir)?;
    let manifest = Manifest {
        software: "npinfer",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seed_derivation: DERIVATION,
        population_seed: stream_seed(cfg.seed, StreamKey::new(0, 0, 0, Stage::Population)),
        iteration_seeds: (0..cfg.k)
            .map(|k| IterationSeeds {
                iteration: k,
                reference_sample: stream_seed(cfg.seed, StreamKey::new(k, 0, 0, Stage::ReferenceSample)),
                nonprob_sample: stream_seed(cfg.seed, StreamKey::new(k, 0, 0, Stage::NonProbSample)),
            })
            .collect(),
        rows_per_iteration: rows_per_iteration(cfg),
        iterations_completed: cfg.k,
        iterations_resumed: resumed,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    Ok(SimulationReport {
        out_dir: out_dir.to_path_buf(),
        summaries,
        iterations_run: todo.len(),
        iterations_resumed: resumed,
    })
}

/// One parsed row of the estimates file.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateLine {
    pub iteration: usize,
    pub scenario: String,
    pub outcome: String,
    pub qr_spec: String,
    pub pm_spec: String,
    pub method: String,
    pub estimate: IterationEstimate,
    pub truth: f64,
}

pub fn read_estimates(path: &Path) -> Result<Vec<EstimateLine>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv { path: path.display().to_string(), source: e })?;
        if rec.len() != 12 {
            return Err(Error::Data(format!("{}: expected 12 fields", path.display())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad number `{}`", path.display(), &rec[i])))
        };
        out.push(EstimateLine {
            iteration: rec[0]
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad iteration", path.display())))?,
            scenario: rec[1].to_string(),
            outcome: rec[2].to_string(),
            qr_spec: rec[3].to_string(),
            pm_spec: rec[4].to_string(),
            method: rec[5].to_string(),
            estimate: IterationEstimate {
                value: num(6)?,
                variance: num(7)?,
                ci_low: num(8)?,
                ci_high: num(9)?,
            },
            truth: num(11)?,
        });
    }
    Ok(out)
}

/// Metrics per slot computed from an estimates file, in first-seen order.
pub fn summarize(lines: &[EstimateLine], outcome: Outcome) -> Result<Vec<SummaryRow>> {
    let mut order: Vec<(String, String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String, String), (Vec<IterationEstimate>, f64)> = BTreeMap::new();
    for l in lines.iter().filter(|l| l.outcome == outcome.as_str()) {
        let key = (l.method.clone(), l.scenario.clone(), l.qr_spec.clone(), l.pm_spec.clone());
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), l.truth)
        });
        if l.estimate.value.is_finite() {
            entry.0.push(l.estimate);
        }
    }
    let mut out = Vec::new();
    for key in order {
        let (est, truth) = &groups[&key];
        let metrics = if est.is_empty() {
            warn!(method = %key.0, "no usable iterations");
            MetricsRow { rbias: f64::NAN, rmse: f64::NAN, crci: f64::NAN, rlci: f64::NAN, rse: f64::NAN, k: 0 }
        } else {
            compute_metrics(est, *truth)?
        };
        out.push(SummaryRow { method: key.0, scenario: key.1, qr_spec: key.2, pm_spec: key.3, metrics });
    }
    Ok(out)
}

fn write_summaries(cfg: &SimConfig, out_dir: &Path) -> Result<BTreeMap<Outcome, Vec<SummaryRow>>> {
    let lines = read_estimates(&out_dir.join(ESTIMATES_FILE))?;
    let mut all = BTreeMap::new();
    for &outcome in &cfg.outcomes {
        let rows = summarize(&lines, outcome)?;
        let path = out_dir.join(summary_file(outcome));
        let mut text = format!("{SUMMARY_HEADER}\n");
        for r in &rows {
            let m = &r.metrics;
            text.push_str(&format!(
                "{},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                r.method, r.scenario, r.qr_spec, r.pm_spec, cfg.gamma1, m.rbias, m.rmse, m.crci, m.rlci, m.rse, m.k
            ));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        all.insert(outcome, rows);
    }
    Ok(all)
}

/// Writes the samples of iteration `k` as input files for estimate mode.
pub fn export_iteration(cfg: &SimConfig, k: usize, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let pops = build_populations(cfg)?;
    let (sr, sa) = draw_samples(cfg, &pops, k)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cov = vec!["x".to_string()];
    let reference = dir.join("reference.csv");
    let sample = dir.join("sample.csv");
    sr.write_csv(&reference, &cov)?;
    sa.write_csv(&sample, &cov)?;
    Ok((reference, sample))
}
