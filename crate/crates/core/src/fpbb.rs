//! Finite population Bayesian bootstrap: completes a weighted replicate to a
//! synthetic population of size N with a weighted Pólya urn.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::samplers::BootstrapReplicate;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRow {
    pub unit_id: usize,
    pub stratum: usize,
    pub design_weight: f64,
    pub x: Vec<f64>,
    pub multiplicity: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    /// One row per distinct unit, sorted by unit id.
    pub rows: Vec<SynthRow>,
    pub total: u64,
    pub source: (usize, usize),
    /// Set when N did not exceed the replicate size and the replicate was
    /// returned unchanged.
    pub passthrough: bool,
}

impl SyntheticPopulation {
    pub fn multiplicities(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.multiplicity as f64).collect()
    }

    pub fn write_csv(&self, path: &Path, covariates: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            write!(out, "id")?;
            for c in covariates {
                write!(out, ",{c}")?;
            }
            writeln!(out, ",multiplicity")?;
            for r in &self.rows {
                write!(out, "{}", r.unit_id)?;
                for v in &r.x {
                    write!(out, ",{v:.16e}")?;
                }
                writeln!(out, ",{}", r.multiplicity)?;
            }
            out.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// Fenwick tree over non-negative masses with prefix search.
#[derive(Debug, Clone)]
struct Fenwick {
    tree: Vec<f64>,
    top: usize,
}

impl Fenwick {
    fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut tree = vec![0.0; n + 1];
        for (i, v) in values.iter().enumerate() {
            tree[i + 1] += v;
            let parent = (i + 1) + ((i + 1) & (i + 1).wrapping_neg());
            if parent <= n {
                let carry = tree[i + 1];
                tree[parent] += carry;
            }
        }
        let top = if n == 0 { 0 } else { 1 << (usize::BITS - 1 - n.leading_zeros()) };
        Fenwick { tree, top }
    }

    fn add(&mut self, i: usize, delta: f64) {
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    /// Smallest index whose inclusive prefix sum exceeds `target`.
    fn search(&self, mut target: f64) -> usize {
        let mut pos = 0;
        let mut step = self.top;
        while step > 0 {
            let next = pos + step;
            if next < self.tree.len() && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(self.tree.len() - 2)
    }
}

/// Weights floored at one, with the deficit taken proportionally from the
/// excess `w - 1` of the remaining units so the total stays `n_total`.
pub fn floor_weights(weights: &[f64], n_total: f64) -> Result<Vec<f64>> {
    let n = weights.len() as f64;
    if weights.iter().all(|w| *w >= 1.0) {
        return Ok(weights.to_vec());
    }
    let excess: f64 = weights.iter().filter(|w| **w > 1.0).map(|w| w - 1.0).sum();
    if !(excess > 0.0) || n_total < n {
        return Err(Error::Data(
            "replicate weights cannot be floored at one without exceeding N".into(),
        ));
    }
    let s = (n_total - n) / excess;
    Ok(weights
        .iter()
        .map(|&w| if w > 1.0 { 1.0 + (w - 1.0) * s } else { 1.0 })
        .collect())
}

/// Weighted Pólya urn completion of `rep` to `n_total` units.
///
/// Each replicate row starts with one copy. At draw `k` unit `i` is chosen
/// with probability
/// `(w_i - 1 + l_i (N - n)/n) / (N - n + (k - 1)(N - n)/n)`
/// where `l_i` counts its earlier selections and `n` is the replicate size.
pub fn polya_synthesize<R: Rng + ?Sized>(
    rep: &BootstrapReplicate,
    n_total: u64,
    source: (usize, usize),
    rng: &mut R,
) -> Result<SyntheticPopulation> {
    if rep.rows.is_empty() {
        return Err(Error::Data("empty bootstrap replicate".into()));
    }
    let n = rep.rows.len();
    let mut counts = vec![1u64; n];
    let passthrough = n_total <= n as u64;
    if !passthrough {
        let nf = n_total as f64;
        let raw: Vec<f64> = rep.rows.iter().map(|r| r.weight).collect();
        let sum: f64 = raw.iter().sum();
        if ((sum - nf) / nf).abs() > 1e-8 {
            return Err(Error::Data(format!(
                "replicate weights sum to {sum}, expected {n_total}"
            )));
        }
        let w = floor_weights(&raw, nf)?;
        let draws = n_total - n as u64;
        let step = draws as f64 / n as f64;
        let mass: Vec<f64> = w.iter().map(|wi| (wi - 1.0).max(0.0)).collect();
        let mut total: f64 = mass.iter().sum();
        let mut tree = Fenwick::new(&mass);
        for k in 0..draws {
            debug_assert!({
                let expected = draws as f64 + k as f64 * step;
                (total - expected).abs() <= 1e-8 * expected.max(1.0)
            });
            let i = tree.search(rng.random::<f64>() * total);
            counts[i] += 1;
            tree.add(i, step);
            total += step;
        }
    }

    let mut merged: BTreeMap<usize, SynthRow> = BTreeMap::new();
    for (r, c) in rep.rows.iter().zip(counts) {
        merged
            .entry(r.unit_id)
            .and_modify(|s| s.multiplicity += c)
            .or_insert_with(|| SynthRow {
                unit_id: r.unit_id,
                stratum: r.stratum,
                design_weight: r.design_weight,
                x: r.x.clone(),
                multiplicity: c,
            });
    }
    let rows: Vec<SynthRow> = merged.into_values().collect();
    let total = rows.iter().map(|r| r.multiplicity).sum();
    Ok(SyntheticPopulation {
        rows,
        total,
        source,
        passthrough,
    })
}

/// Monte Carlo mean multiplicity per unit over `draws` syntheses.
pub fn expected_frequency_check<R: Rng + ?Sized>(
    rep: &BootstrapReplicate,
    n_total: u64,
    draws: usize,
    rng: &mut R,
) -> Result<BTreeMap<usize, f64>> {
    if draws == 0 {
        return Err(Error::Config("at least one synthesis is required".into()));
    }
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for _ in 0..draws {
        for r in polya_synthesize(rep, n_total, (0, 0), rng)?.rows {
            *acc.entry(r.unit_id).or_default() += r.multiplicity as f64;
        }
    }
    acc.values_mut().for_each(|v| *v /= draws as f64);
    Ok(acc)
}
