//! One pass of the bootstrap / synthesis / estimation loop on a pair of
//! samples, shared by simulation and estimation on user files.

use nalgebra::DMatrix;
use rayon::prelude::*;
use tracing::warn;

use crate::error::{Error, Result};
use crate::estimators::{
    estimate_aipw, estimate_fw, estimate_model_based, rubin_combine, CiReference,
    CombinedEstimate, EstimateRecord, Method,
};
use crate::fpbb::{polya_synthesize, SyntheticPopulation};
use crate::glmcore::{pseudo_propensity_weighted, qr_design, QrDesign};
use crate::harness::design::{DesignRow, PmDesign, PmLayout};
use crate::popmodel::{NonProbSample, Outcome, ProbabilitySample, Scenario};
use crate::rng::{stream_rng, Stage, StreamKey};
use crate::samplers::{direct_replicate, rao_wu_bootstrap, srs_indices, BootstrapReplicate};
use crate::smoothers::{fit_partially_linear, predict, Link, SmootherSpec};

/// Share of aborted cells above which a method's estimate is withheld.
pub const MAX_FAILED_SHARE: f64 = 0.05;

/// An outcome measured on the non-probability sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    /// Simulation scenario generating `y`, used by the true prediction design.
    pub scenario: Option<Scenario>,
    pub outcome: Outcome,
    /// Aligned with the non-probability sample rows.
    pub y_sample: Vec<f64>,
    /// Aligned with the reference rows; simulation only.
    pub y_reference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub b: usize,
    pub l: usize,
    pub methods: Vec<Method>,
    pub qr_specs: Vec<QrDesign>,
    pub pm_specs: Vec<PmDesign>,
    pub ignore_design: bool,
    /// Known population size.
    pub n_total: Option<u64>,
    pub ci_reference: CiReference,
    pub pm_strata: Option<usize>,
    pub pm_use_weight: bool,
    pub seed: u64,
}

/// Output coordinates of one combined estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub response: usize,
    pub method: Method,
    pub qr: Option<QrDesign>,
    pub pm: Option<PmDesign>,
}

impl Slot {
    pub fn qr_label(&self) -> &'static str {
        self.qr.map_or("na", QrDesign::as_str)
    }

    pub fn pm_label(&self) -> &'static str {
        self.pm.map_or("na", PmDesign::as_str)
    }
}

/// Estimate slots in output order: response, method, QR spec, PM spec.
pub fn slots(spec: &PipelineSpec, responses: usize) -> Vec<Slot> {
    let mut methods = spec.methods.clone();
    methods.sort();
    methods.dedup();
    let mut out = Vec::new();
    for response in 0..responses {
        for &method in &methods {
            if method.is_baseline() {
                out.push(Slot { response, method, qr: None, pm: None });
            } else if method == Method::Ipsw {
                for &qr in &spec.qr_specs {
                    out.push(Slot { response, method, qr: Some(qr), pm: None });
                }
            } else {
                for &qr in &spec.qr_specs {
                    for &pm in &spec.pm_specs {
                        out.push(Slot { response, method, qr: Some(qr), pm: Some(pm) });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub slots: Vec<Slot>,
    /// `None` when too many cells aborted.
    pub estimates: Vec<Option<CombinedEstimate>>,
    /// Aborted `(b, l)` cells per slot.
    pub failed_cells: Vec<usize>,
}

/// Bootstrap replicate `b` of the reference sample with weights scaled to
/// the synthetic population size, which is also returned.
pub fn reference_replicate(
    sr: &ProbabilitySample,
    spec: &PipelineSpec,
    iteration: usize,
    b: usize,
) -> Result<(BootstrapReplicate, u64)> {
    let mut rep = if spec.ignore_design {
        direct_replicate(sr, 1.0)
    } else {
        let mut rng = stream_rng(spec.seed, StreamKey::new(iteration, b, 0, Stage::RaoWu));
        rao_wu_bootstrap(sr, 1.0, &mut rng)?
    };
    let size = match spec.n_total {
        Some(n) => n,
        None => rep.n_hat.round().max(1.0) as u64,
    };
    rep.rows.iter_mut().for_each(|r| r.weight *= size as f64);
    Ok((rep, size))
}

pub fn synthesize_cell(
    rep: &BootstrapReplicate,
    size: u64,
    spec: &PipelineSpec,
    iteration: usize,
    b: usize,
    l: usize,
) -> Result<SyntheticPopulation> {
    let mut rng = stream_rng(spec.seed, StreamKey::new(iteration, b, l, Stage::Polya));
    polya_synthesize(rep, size, (b, l), &mut rng)
}

/// Distinct rows of a resample with their counts.
struct Collapsed {
    rows: Vec<usize>,
    counts: Vec<f64>,
    /// Position in `rows` of every resampled draw.
    position: Vec<usize>,
}

fn collapse(idx: &[usize], n: usize) -> Collapsed {
    let mut count = vec![0usize; n];
    idx.iter().for_each(|&i| count[i] += 1);
    let mut slot = vec![usize::MAX; n];
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for (i, &c) in count.iter().enumerate() {
        if c > 0 {
            slot[i] = rows.len();
            rows.push(i);
            counts.push(c as f64);
        }
    }
    let position = idx.iter().map(|&i| slot[i]).collect();
    Collapsed { rows, counts, position }
}

struct BootstrapDraw {
    sample: Collapsed,
    replicate: BootstrapReplicate,
    size: u64,
}

struct Context<'a> {
    sa: &'a NonProbSample,
    responses: &'a [Response],
    pi_true: Option<&'a [f64]>,
    spec: &'a PipelineSpec,
    slots: &'a [Slot],
    iteration: usize,
}

fn link_for(outcome: Outcome) -> Link {
    match outcome {
        Outcome::Continuous => Link::Identity,
        Outcome::Binary => Link::Logit,
    }
}

impl Context<'_> {
    fn baseline(&self, slot: &Slot, draw: &BootstrapDraw) -> Result<f64> {
        let r = &self.responses[slot.response];
        let rows = &draw.sample.rows;
        let counts = &draw.sample.counts;
        let y: Vec<f64> = rows.iter().map(|&i| r.y_sample[i]).collect();
        match slot.method {
            Method::UwA => estimate_fw(&y, counts),
            Method::FwA => {
                let pi = self
                    .pi_true
                    .ok_or_else(|| Error::Config("FW_A needs the true selection probabilities".into()))?;
                let w: Vec<f64> = rows.iter().zip(counts).map(|(&i, c)| c / pi[i]).collect();
                estimate_fw(&y, &w)
            }
            Method::UwR | Method::FwR => {
                let yr = r
                    .y_reference
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{} needs reference outcomes", slot.method)))?;
                let y: Vec<f64> = draw.replicate.rows.iter().map(|row| yr[row.row]).collect();
                let w: Vec<f64> = if slot.method == Method::UwR {
                    vec![1.0; y.len()]
                } else {
                    draw.replicate.rows.iter().map(|row| row.weight).collect()
                };
                estimate_fw(&y, &w)
            }
            _ => unreachable!("not a baseline"),
        }
    }

    /// Values of the model-dependent slots in one `(b, l)` cell.
    fn cell(&self, draw: &BootstrapDraw, b: usize, l: usize) -> Result<Vec<Option<f64>>> {
        let spec = self.spec;
        let synth = synthesize_cell(&draw.replicate, draw.size, spec, self.iteration, b, l)?;
        let mult = synth.multiplicities();
        let total = synth.total as f64;
        let s = &draw.sample;
        let xs: Vec<Vec<f64>> = s.rows.iter().map(|&i| self.sa.rows[i].x.clone()).collect();
        let xu: Vec<Vec<f64>> = synth.rows.iter().map(|r| r.x.clone()).collect();
        let sample_rows: Vec<DesignRow<'_>> = s
            .rows
            .iter()
            .map(|&i| {
                let r = &self.sa.rows[i];
                DesignRow { x: &r.x, stratum: r.stratum, weight: r.weight }
            })
            .collect();
        let synth_rows: Vec<DesignRow<'_>> = synth
            .rows
            .iter()
            .map(|r| DesignRow { x: &r.x, stratum: Some(r.stratum), weight: Some(r.design_weight) })
            .collect();

        let mut out = vec![None; self.slots.len()];
        let mut pm_cache: Vec<((Option<Scenario>, PmDesign), DMatrix<f64>, DMatrix<f64>)> = Vec::new();
        for &qr in &spec.qr_specs {
            let wanted = self
                .slots
                .iter()
                .any(|sl| sl.qr == Some(qr));
            if !wanted {
                continue;
            }
            let assign = match pseudo_propensity_weighted(
                &qr_design(&xs, qr),
                &s.counts,
                &qr_design(&xu, qr),
                &mult,
            ) {
                Ok(a) => a,
                Err(e) => {
                    warn!(iteration = self.iteration, b, l, qr = qr.as_str(), error = %e, "propensity fit failed");
                    continue;
                }
            };
            let g_s: Vec<f64> = assign.pi_hat_sample.iter().map(|p| p.ln()).collect();
            let g_u: Vec<f64> = assign.pi_hat.iter().map(|p| p.ln()).collect();
            let pi_exp: Vec<f64> = s.position.iter().map(|&p| assign.pi_hat_sample[p]).collect();

            for (k, slot) in self.slots.iter().enumerate() {
                if slot.qr != Some(qr) {
                    continue;
                }
                let r = &self.responses[slot.response];
                let y: Vec<f64> = s.rows.iter().map(|&i| r.y_sample[i]).collect();
                let value = match slot.pm {
                    None => {
                        let w: Vec<f64> =
                            s.counts.iter().zip(&assign.pi_hat_sample).map(|(c, p)| c / p).collect();
                        estimate_fw(&y, &w)
                    }
                    Some(pm) => {
                        let key = (r.scenario, pm);
                        let pos = match pm_cache.iter().position(|(k, _, _)| *k == key) {
                            Some(p) => p,
                            None => {
                                let layout = PmLayout {
                                    scenario: r.scenario,
                                    strata: spec.pm_strata,
                                    use_weight: spec.pm_use_weight,
                                };
                                let xs_pm = layout.matrix(pm, &sample_rows)?;
                                let xu_pm = layout.matrix(pm, &synth_rows)?;
                                pm_cache.push((key, xs_pm, xu_pm));
                                pm_cache.len() - 1
                            }
                        };
                        let (_, xs_pm, xu_pm) = &pm_cache[pos];
                        self.dr_estimate(slot.method, r.outcome, s, &y, xs_pm, xu_pm, &g_s, &g_u, &pi_exp, &mult, total)
                    }
                };
                match value {
                    Ok(v) if v.is_finite() => out[k] = Some(v),
                    Ok(_) => warn!(iteration = self.iteration, b, l, method = %slot.method, "non-finite estimate"),
                    Err(e) => {
                        warn!(iteration = self.iteration, b, l, method = %slot.method, error = %e, "estimate failed")
                    }
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn dr_estimate(
        &self,
        method: Method,
        outcome: Outcome,
        sample: &Collapsed,
        y: &[f64],
        xs: &DMatrix<f64>,
        xu: &DMatrix<f64>,
        g_s: &[f64],
        g_u: &[f64],
        pi_exp: &[f64],
        mult: &[f64],
        total: f64,
    ) -> Result<f64> {
        let kind = method.smoother().expect("prediction-model method");
        let s = SmootherSpec::new(kind, link_for(outcome));
        let fit = fit_partially_linear(&s, y, xs, g_s, Some(&sample.counts))?;
        let yhat_u = predict(&fit, xu, g_u)?;
        let y_exp: Vec<f64> = sample.position.iter().map(|&p| y[p]).collect();
        let yhat_exp: Vec<f64> = sample.position.iter().map(|&p| fit.fitted[p]).collect();
        if method == Method::Aipw {
            estimate_aipw(&y_exp, &yhat_exp, pi_exp, &yhat_u, mult, total)
        } else {
            estimate_model_based(&y_exp, &yhat_exp, &yhat_u, mult, total)
        }
    }
}

/// Runs the loop for every slot and combines each with Rubin's rule.
///
/// `pi_true` (aligned with `sa`) is needed only for `FW_A`.
pub fn run_pipeline(
    sa: &NonProbSample,
    sr: &ProbabilitySample,
    responses: &[Response],
    pi_true: Option<&[f64]>,
    spec: &PipelineSpec,
    iteration: usize,
) -> Result<PipelineOutput> {
    if spec.b < 2 || spec.l < 1 {
        return Err(Error::Config(format!("need B >= 2 and L >= 1, got B={}, L={}", spec.b, spec.l)));
    }
    for r in responses {
        if r.y_sample.len() != sa.len() {
            return Err(Error::Data("response length differs from the sample".into()));
        }
        if let Some(yr) = &r.y_reference {
            if yr.len() != sr.len() {
                return Err(Error::Data("reference outcome length differs from the reference sample".into()));
            }
        }
    }
    let slots = slots(spec, responses.len());
    for sl in &slots {
        if sl.method == Method::FwA && pi_true.is_none() {
            return Err(Error::Config("FW_A needs the true selection probabilities".into()));
        }
        if sl.method.needs_reference_outcome() && responses[sl.response].y_reference.is_none() {
            return Err(Error::Config(format!("{} needs outcomes on the reference sample", sl.method)));
        }
    }
    let ctx = Context { sa, responses, pi_true, spec, slots: &slots, iteration };

    let mut draws = Vec::with_capacity(spec.b);
    for b in 0..spec.b {
        let mut rng = stream_rng(spec.seed, StreamKey::new(iteration, b, 0, Stage::SampleBootstrap));
        let sample = collapse(&srs_indices(sa.len(), &mut rng), sa.len());
        let (replicate, size) = reference_replicate(sr, spec, iteration, b)?;
        draws.push(BootstrapDraw { sample, replicate, size });
    }

    let (b_count, l_count) = (spec.b, spec.l);
    let mut grid: Vec<Vec<Option<f64>>> = vec![vec![None; b_count * l_count]; slots.len()];
    for (b, draw) in draws.iter().enumerate() {
        for (k, sl) in slots.iter().enumerate() {
            if sl.method.is_baseline() {
                let v = ctx.baseline(sl, draw)?;
                for l in 0..l_count {
                    grid[k][b * l_count + l] = Some(v);
                }
            }
        }
    }
    let any_model = slots.iter().any(|s| !s.method.is_baseline());
    if any_model {
        let cells: Vec<Vec<Option<f64>>> = (0..b_count * l_count)
            .into_par_iter()
            .map(|c| {
                let (b, l) = (c / l_count, c % l_count);
                ctx.cell(&draws[b], b, l).unwrap_or_else(|e| {
                    warn!(iteration, b, l, error = %e, "cell aborted");
                    vec![None; slots.len()]
                })
            })
            .collect();
        for (c, values) in cells.into_iter().enumerate() {
            for (k, sl) in slots.iter().enumerate() {
                if !sl.method.is_baseline() {
                    grid[k][c] = values[k];
                }
            }
        }
    }

    let m = sr.psu_count();
    let h = sr.strata_count();
    let mut estimates = Vec::with_capacity(slots.len());
    let mut failed_cells = Vec::with_capacity(slots.len());
    for (k, sl) in slots.iter().enumerate() {
        let failed = grid[k].iter().filter(|v| v.is_none()).count();
        failed_cells.push(failed);
        if failed as f64 > MAX_FAILED_SHARE * (b_count * l_count) as f64 {
            warn!(iteration, method = %sl.method, failed, "too many aborted cells; estimate withheld");
            estimates.push(None);
            continue;
        }
        estimates.push(combine_with_gaps(sl.method, &grid[k], b_count, l_count, m, h, spec.ci_reference));
    }
    Ok(PipelineOutput { slots, estimates, failed_cells })
}

/// Fills a missing cell with the mean of its replicate's other cells; a
/// replicate with no surviving cell is dropped.
fn combine_with_gaps(
    method: Method,
    values: &[Option<f64>],
    b: usize,
    l: usize,
    m: usize,
    h: usize,
    reference: CiReference,
) -> Option<CombinedEstimate> {
    let mut records = Vec::with_capacity(b * l);
    let mut kept = 0;
    for chunk in values.chunks(l) {
        let present: Vec<f64> = chunk.iter().flatten().copied().collect();
        if present.is_empty() {
            continue;
        }
        let fill = present.iter().sum::<f64>() / present.len() as f64;
        for (j, v) in chunk.iter().enumerate() {
            records.push(EstimateRecord { method, b: kept, l: j, value: v.unwrap_or(fill), n_used: 0 });
        }
        kept += 1;
    }
    rubin_combine(&records, kept, l, m, h, reference).ok()
}
