//! Reference-survey and non-probability sampling, plus the two bootstrap
//! schemes used by the inference algorithm.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::popmodel::{
    FinitePopulation, NonProbRow, NonProbSample, Outcome, ProbabilitySample, ReferenceRow,
};

/// One row of a bootstrap replicate of the reference survey.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub unit_id: usize,
    /// Index of the source row in the reference sample.
    pub row: usize,
    pub stratum: usize,
    /// Original design weight of the unit.
    pub design_weight: f64,
    /// Rescaled weight, normalized so the replicate sums to N.
    pub weight: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapReplicate {
    pub rows: Vec<ReplicateRow>,
    /// Nominal replicate size `n_R - H`. Informational; the Pólya urn uses
    /// the actual row count.
    pub n_star: usize,
    /// Sum of rescaled weights before normalization.
    pub n_hat: f64,
}

impl BootstrapReplicate {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.rows.iter().map(|r| r.weight).sum()
    }
}

/// First-order inclusion probabilities `m * mos / sum(mos)`, with any value
/// above one clamped to one and the remaining sample size spread
/// proportionally over the other units.
pub fn pps_inclusion_probs(mos: &[f64], m: usize) -> Result<Vec<f64>> {
    if m > mos.len() {
        return Err(Error::SampleSize {
            requested: m,
            available: mos.len(),
        });
    }
    if mos.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Data("measures of size must be finite and non-negative".into()));
    }
    let positive = mos.iter().filter(|v| **v > 0.0).count();
    if positive < m {
        return Err(Error::SampleSize {
            requested: m,
            available: positive,
        });
    }
    let mut pi = vec![0.0; mos.len()];
    let mut certain = vec![false; mos.len()];
    loop {
        let fixed = certain.iter().filter(|c| **c).count();
        let remaining = (m - fixed) as f64;
        let free_total: f64 = mos
            .iter()
            .zip(&certain)
            .filter(|(_, c)| !**c)
            .map(|(v, _)| v)
            .sum();
        let mut changed = false;
        for i in 0..mos.len() {
            if certain[i] {
                pi[i] = 1.0;
                continue;
            }
            pi[i] = if remaining > 0.0 {
                remaining * mos[i] / free_total
            } else {
                0.0
            };
            if pi[i] >= 1.0 {
                certain[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(pi);
        }
    }
}

/// Systematic PPS on a uniformly random ordering of the units.
///
/// Returns `m` distinct indices, sorted. Unit `i` is included with
/// probability `pps_inclusion_probs(mos, m)[i]`.
pub fn pps_without_replacement<R: Rng + ?Sized>(
    mos: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pi = pps_inclusion_probs(mos, m)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut picked: Vec<usize> = (0..pi.len()).filter(|&i| pi[i] >= 1.0).collect();
    let need = m - picked.len();
    if need > 0 {
        let mut order: Vec<usize> = (0..pi.len()).filter(|&i| pi[i] < 1.0).collect();
        order.shuffle(rng);
        // Rescale the cumulative sum to end exactly at `need` so rounding
        // cannot lose the last selection point.
        let total: f64 = order.iter().map(|&i| pi[i]).sum();
        let scale = need as f64 / total;
        let start: f64 = rng.random::<f64>();
        let mut cum = 0.0;
        let mut next = start;
        for (pos, &i) in order.iter().enumerate() {
            cum = if pos + 1 == order.len() {
                need as f64
            } else {
                cum + pi[i] * scale
            };
            if next < cum {
                picked.push(i);
                next += 1.0;
            }
            if picked.len() == m {
                break;
            }
        }
    }
    debug_assert_eq!(picked.len(), m);
    picked.sort_unstable();
    Ok(picked)
}

/// Stratified two-stage PPS sample: `m_h` clusters per stratum by PSU
/// measure of size, then `n_hj` units per selected cluster by SSU measure.
pub fn draw_reference_sample<R: Rng + ?Sized>(
    pop: &FinitePopulation,
    m_h: usize,
    n_hj: usize,
    rng: &mut R,
) -> Result<ProbabilitySample> {
    let d = pop.design;
    if m_h > d.clusters_per_stratum || n_hj > d.cluster_size {
        return Err(Error::SampleSize {
            requested: m_h.max(n_hj),
            available: if m_h > d.clusters_per_stratum {
                d.clusters_per_stratum
            } else {
                d.cluster_size
            },
        });
    }
    let mut rows = Vec::with_capacity(d.strata * m_h * n_hj);
    for h in 0..d.strata {
        let first = h * d.clusters_per_stratum;
        let mos: Vec<f64> = (first..first + d.clusters_per_stratum)
            .map(|c| pop.cluster_units(c)[0].mos_psu)
            .collect();
        for j in pps_without_replacement(&mos, m_h, rng)? {
            let cluster = first + j;
            let units = pop.cluster_units(cluster);
            let ssu: Vec<f64> = units.iter().map(|u| u.mos_ssu).collect();
            for i in pps_without_replacement(&ssu, n_hj, rng)? {
                let u = &units[i];
                rows.push(ReferenceRow {
                    unit_id: u.id,
                    stratum: h,
                    psu: cluster,
                    weight: u.w_ref,
                    x: vec![u.x],
                });
            }
        }
    }
    let labels = (0..d.strata).map(|h| h.to_string()).collect();
    ProbabilitySample::from_rows(rows, labels)
}

/// Indices selected by independent Bernoulli trials with probabilities `pi`.
pub fn poisson_indices<R: Rng + ?Sized>(pi: &[f64], rng: &mut R) -> Vec<usize> {
    pi.iter()
        .enumerate()
        .filter_map(|(i, &p)| (rng.random::<f64>() < p).then_some(i))
        .collect()
}

/// Poisson sample with the population's selection probabilities. The
/// selection consumes the random stream identically for every outcome.
pub fn draw_poisson_sample<R: Rng + ?Sized>(
    pop: &FinitePopulation,
    outcome: Outcome,
    rng: &mut R,
) -> Result<NonProbSample> {
    let pi: Vec<f64> = pop.units.iter().map(|u| u.pi_a).collect();
    let rows = poisson_indices(&pi, rng)
        .into_iter()
        .map(|i| {
            let u = &pop.units[i];
            NonProbRow {
                unit_id: u.id,
                x: vec![u.x],
                y: pop.outcome(i, outcome),
                stratum: Some(u.stratum),
                weight: Some(u.w_ref),
            }
        })
        .collect();
    NonProbSample::new(rows)
}

/// Rao-Wu rescaling bootstrap with `m_h - 1` PSUs drawn with replacement per
/// stratum. Rows of a PSU drawn twice appear twice. Weights are rescaled by
/// `m_h / (m_h - 1)` and then normalized to `n_total`.
pub fn rao_wu_bootstrap<R: Rng + ?Sized>(
    s: &ProbabilitySample,
    n_total: f64,
    rng: &mut R,
) -> Result<BootstrapReplicate> {
    for (&h, psus) in &s.psu_per_stratum {
        if psus.len() < 2 {
            return Err(Error::SinglePsuStratum {
                stratum: s.stratum_label(h),
                count: psus.len(),
            });
        }
    }
    let mut by_psu: std::collections::BTreeMap<usize, Vec<(usize, &ReferenceRow)>> =
        Default::default();
    for (i, r) in s.rows.iter().enumerate() {
        by_psu.entry(r.psu).or_default().push((i, r));
    }

    let mut rows = Vec::with_capacity(s.rows.len());
    for psus in s.psu_per_stratum.values() {
        let m = psus.len();
        let factor = m as f64 / (m - 1) as f64;
        for _ in 0..m - 1 {
            let psu = psus[rng.random_range(0..m)];
            for &(row, r) in &by_psu[&psu] {
                rows.push(ReplicateRow {
                    unit_id: r.unit_id,
                    row,
                    stratum: r.stratum,
                    design_weight: r.weight,
                    weight: r.weight * factor,
                    x: r.x.clone(),
                });
            }
        }
    }
    let n_hat: f64 = rows.iter().map(|r| r.weight).sum();
    let scale = n_total / n_hat;
    rows.iter_mut().for_each(|r| r.weight *= scale);
    Ok(BootstrapReplicate {
        rows,
        n_star: s.rows.len() - s.strata_count(),
        n_hat,
    })
}

/// The reference sample itself as a replicate, ignoring strata and clusters.
pub fn direct_replicate(s: &ProbabilitySample, n_total: f64) -> BootstrapReplicate {
    let n_hat: f64 = s.rows.iter().map(|r| r.weight).sum();
    let scale = n_total / n_hat;
    let rows = s
        .rows
        .iter()
        .enumerate()
        .map(|(row, r)| ReplicateRow {
            unit_id: r.unit_id,
            row,
            stratum: r.stratum,
            design_weight: r.weight,
            weight: r.weight * scale,
            x: r.x.clone(),
        })
        .collect();
    BootstrapReplicate {
        rows,
        n_star: s.rows.len(),
        n_hat,
    }
}

/// Simple random resample of the same size, with replacement.
pub fn srs_bootstrap<R: Rng + ?Sized>(s: &NonProbSample, rng: &mut R) -> NonProbSample {
    let rows = srs_indices(s.rows.len(), rng)
        .into_iter()
        .map(|i| s.rows[i].clone())
        .collect();
    NonProbSample { rows }
}

/// Row indices of a with-replacement resample of size `n`.
pub fn srs_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::popmodel::{generate_population, PopulationConfig, Scenario};
    use crate::rng::{stream_rng, Stage, StreamKey};

    fn rng(k: usize) -> rand_chacha::ChaCha8Rng {
        stream_rng(99, StreamKey::new(k, 0, 0, Stage::ReferenceSample))
    }

    #[test]
    fn equal_sizes_give_uniform_pairs() {
        let mut r = rng(0);
        let mut counts = std::collections::HashMap::new();
        let reps = 60_000;
        for _ in 0..reps {
            let s = pps_without_replacement(&[1.0; 4], 2, &mut r).unwrap();
            *counts.entry(s).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for c in counts.values() {
            let p = *c as f64 / reps as f64;
            assert!((p - 1.0 / 6.0).abs() < 0.01, "pair frequency {p}");
        }
    }

    #[test]
    fn degenerate_mass_is_always_selected() {
        let mut r = rng(1);
        for _ in 0..1000 {
            let s = pps_without_replacement(&[1.0, 1e-12, 1e-12, 1e-12], 1, &mut r).unwrap();
            assert_eq!(s, vec![0]);
        }
    }

    #[test]
    fn inclusion_frequencies_match_targets() {
        let mut r = rng(2);
        let mut hits = [0usize; 4];
        let reps = 100_000;
        for _ in 0..reps {
            for i in pps_without_replacement(&[1.0, 2.0, 3.0, 4.0], 2, &mut r).unwrap() {
                hits[i] += 1;
            }
        }
        for (h, target) in hits.iter().zip([0.2, 0.4, 0.6, 0.8]) {
            assert!((*h as f64 / reps as f64 - target).abs() < 0.01);
        }
    }

    #[test]
    fn large_sizes_are_clamped() {
        let pi = pps_inclusion_probs(&[10.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(pi[0], 1.0);
        for p in &pi[1..] {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let mut r = rng(3);
        for _ in 0..200 {
            let s = pps_without_replacement(&[10.0, 1.0, 1.0, 1.0], 2, &mut r).unwrap();
            assert!(s.contains(&0) && s.len() == 2);
        }
    }

    #[test]
    fn oversampling_is_an_error() {
        let mut r = rng(4);
        assert!(matches!(
            pps_without_replacement(&[1.0, 2.0], 3, &mut r),
            Err(Error::SampleSize { .. })
        ));
    }

    fn small_pop() -> FinitePopulation {
        generate_population(
            &PopulationConfig::new(5_000, 20, 10, 25, 250.0, 0.3, Scenario::Lin),
            21,
        )
        .unwrap()
    }

    #[test]
    fn reference_sample_shape() {
        let pop = small_pop();
        let s = draw_reference_sample(&pop, 2, 5, &mut rng(5)).unwrap();
        assert_eq!(s.len(), 200);
        assert_eq!(s.psu_count(), 40);
        assert!(s.psu_per_stratum.values().all(|p| p.len() == 2));
    }

    #[test]
    fn census_has_equal_normalized_weights_only_when_sizes_match() {
        let pop = small_pop();
        let s = draw_reference_sample(&pop, 10, 25, &mut rng(6)).unwrap();
        assert_eq!(s.len(), pop.len());
        let total: f64 = s.rows.iter().map(|r| r.weight).sum();
        assert!((total - 5_000.0).abs() < 1e-6);
    }

    #[test]
    fn poisson_extremes() {
        let mut r = rng(7);
        assert_eq!(poisson_indices(&[1.0; 50], &mut r).len(), 50);
        assert!(poisson_indices(&[0.0; 50], &mut r).is_empty());
        let sizes: Vec<f64> = (0..400)
            .map(|_| poisson_indices(&vec![0.01; 50_000], &mut r).len() as f64)
            .collect();
        let mean = sizes.iter().sum::<f64>() / 400.0;
        let sd = (sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 399.0).sqrt();
        assert!((mean - 500.0).abs() < 3.0 * 22.25 / 20.0);
        assert!((sd - 22.25).abs() < 3.0);
    }

    #[test]
    fn poisson_sample_size_matches_calibration() {
        let pop = small_pop();
        let mut r = rng(8);
        let sizes: Vec<f64> = (0..1000)
            .map(|_| draw_poisson_sample(&pop, Outcome::Continuous, &mut r).unwrap().len() as f64)
            .collect();
        let mean = sizes.iter().sum::<f64>() / 1000.0;
        let var: f64 = pop.units.iter().map(|u| u.pi_a * (1.0 - u.pi_a)).sum();
        assert!((mean - 250.0).abs() < 3.0 * (var / 1000.0).sqrt());
    }

    #[test]
    fn rao_wu_rescaling_and_shape() {
        let pop = small_pop();
        let s = draw_reference_sample(&pop, 2, 5, &mut rng(9)).unwrap();
        let rep = rao_wu_bootstrap(&s, 5_000.0, &mut rng(10)).unwrap();
        assert_eq!(rep.len(), 100);
        assert_eq!(rep.n_star, 180);
        assert!((rep.weight_sum() - 5_000.0).abs() < 1e-6);
        // m_h = 2 doubles every weight before normalization.
        let doubled: f64 = rep.rows.iter().map(|r| 2.0 * r.design_weight).sum();
        assert!((rep.n_hat - doubled).abs() < 1e-9);
        // Exactly one PSU per stratum.
        let mut strata: Vec<usize> = rep.rows.iter().map(|r| r.stratum).collect();
        strata.dedup();
        assert_eq!(strata.len(), 20);
    }

    #[test]
    fn rao_wu_three_psus() {
        let rows: Vec<ReferenceRow> = (0..3)
            .map(|p| ReferenceRow {
                unit_id: p,
                stratum: 0,
                psu: p,
                weight: 30.0,
                x: vec![p as f64],
            })
            .collect();
        let s = ProbabilitySample::from_rows(rows, vec!["a".into()]).unwrap();
        let rep = rao_wu_bootstrap(&s, 90.0, &mut rng(11)).unwrap();
        assert_eq!(rep.len(), 2);
        assert!((rep.n_hat - 90.0).abs() < 1e-12);
    }

    #[test]
    fn single_psu_stratum_is_rejected_by_name() {
        let rows = vec![
            ReferenceRow { unit_id: 0, stratum: 0, psu: 0, weight: 1.0, x: vec![0.0] },
            ReferenceRow { unit_id: 1, stratum: 0, psu: 1, weight: 1.0, x: vec![0.0] },
            ReferenceRow { unit_id: 2, stratum: 1, psu: 2, weight: 1.0, x: vec![0.0] },
        ];
        let s = ProbabilitySample::from_rows(rows, vec!["north".into(), "south".into()]).unwrap();
        match rao_wu_bootstrap(&s, 3.0, &mut rng(12)) {
            Err(Error::SinglePsuStratum { stratum, count }) => {
                assert_eq!(stratum, "south");
                assert_eq!(count, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn srs_bootstrap_cases() {
        let one = NonProbSample::new(vec![NonProbRow {
            unit_id: 7,
            x: vec![1.0],
            y: 2.0,
            stratum: None,
            weight: None,
        }])
        .unwrap();
        let b = srs_bootstrap(&one, &mut rng(13));
        assert_eq!(b.len(), 1);
        assert_eq!(b.rows[0].unit_id, 7);

        let rows: Vec<NonProbRow> = (0..10)
            .map(|i| NonProbRow { unit_id: i, x: vec![0.0], y: i as f64, stratum: None, weight: None })
            .collect();
        let s = NonProbSample::new(rows).unwrap();
        let mut r = rng(14);
        let reps = 10_000;
        let means: Vec<f64> = (0..reps)
            .map(|_| srs_bootstrap(&s, &mut r).y().iter().sum::<f64>() / 10.0)
            .collect();
        let m = means.iter().sum::<f64>() / reps as f64;
        let sd = (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!((m - 4.5).abs() < 3.0 * sd / (reps as f64).sqrt());
    }
}
