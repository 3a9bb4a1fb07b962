use npinfer::popmodel::{generate_population, PopulationConfig, ProbabilitySample, ReferenceRow, Scenario};
use npinfer::rng::{stream_rng, Stage, StreamKey};
use npinfer::samplers::{
    draw_reference_sample, pps_inclusion_probs, pps_without_replacement, rao_wu_bootstrap,
};
use npinfer::Error;

fn rng(k: usize, stage: Stage) -> rand_chacha::ChaCha8Rng {
    stream_rng(2024, StreamKey::new(k, 0, 0, stage))
}

#[test]
fn systematic_pps_hits_its_inclusion_probabilities() {
    let mos = [0.4, 1.0, 2.5, 3.0, 0.7, 5.0, 1.2, 9.0];
    let m = 3;
    let pi = pps_inclusion_probs(&mos, m).unwrap();
    assert!((pi.iter().sum::<f64>() - m as f64).abs() < 1e-12);
    // 9.0 is large enough to be taken with certainty.
    assert_eq!(pi[7], 1.0);

    let draws = 20_000;
    let mut hits = vec![0usize; mos.len()];
    let mut r = rng(0, Stage::ReferenceSample);
    for _ in 0..draws {
        let s = pps_without_replacement(&mos, m, &mut r).unwrap();
        assert_eq!(s.len(), m);
        for i in s {
            hits[i] += 1;
        }
    }
    for (i, &p) in pi.iter().enumerate() {
        let f = hits[i] as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt().max(1e-9);
        assert!((f - p).abs() <= 4.0 * se, "unit {i}: {f} vs {p}");
    }
}

#[test]
fn horvitz_thompson_total_is_unbiased() {
    let cfg = PopulationConfig::new(2_000, 8, 10, 25, 100.0, 0.3, Scenario::Lin);
    let pop = generate_population(&cfg, 5).unwrap();
    let d = pop.design;
    let (m_h, n_hj) = (2, 5);

    // Exact inclusion probabilities of every unit under the two-stage design.
    let mut incl = vec![0.0; pop.len()];
    for h in 0..d.strata {
        let first = h * d.clusters_per_stratum;
        let mos: Vec<f64> = (first..first + d.clusters_per_stratum)
            .map(|c| pop.cluster_units(c)[0].mos_psu)
            .collect();
        let p1 = pps_inclusion_probs(&mos, m_h).unwrap();
        for (j, p) in p1.iter().enumerate() {
            let units = pop.cluster_units(first + j);
            let ssu: Vec<f64> = units.iter().map(|u| u.mos_ssu).collect();
            let p2 = pps_inclusion_probs(&ssu, n_hj).unwrap();
            for (u, q) in units.iter().zip(p2) {
                incl[u.id] = p * q;
            }
        }
    }
    let total: f64 = pop.units.iter().map(|u| u.y_cont).sum();

    let reps = 2_000;
    let mut est = Vec::with_capacity(reps);
    for k in 0..reps {
        let s = draw_reference_sample(&pop, m_h, n_hj, &mut rng(k, Stage::ReferenceSample)).unwrap();
        est.push(s.rows.iter().map(|r| pop.units[r.unit_id].y_cont / incl[r.unit_id]).sum::<f64>());
    }
    let mean = est.iter().sum::<f64>() / reps as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    assert!((mean - total).abs() <= 3.0 * se, "HT {mean} vs {total} (se {se})");
}

#[test]
fn design_weights_are_proportional_to_inverse_inclusion() {
    let cfg = PopulationConfig::new(2_000, 8, 10, 25, 100.0, 0.3, Scenario::Lin);
    let pop = generate_population(&cfg, 6).unwrap();
    // Within a stratum, w * pi_psu * (v2 share) is the same constant.
    for h in 0..pop.design.strata {
        let first = h * pop.design.clusters_per_stratum;
        let units: Vec<_> = (first..first + pop.design.clusters_per_stratum)
            .flat_map(|c| pop.cluster_units(c).iter())
            .collect();
        let ssu_total: f64 = units.iter().map(|u| u.mos_ssu).sum();
        let k: Vec<f64> = units
            .iter()
            .map(|u| u.w_ref * pop.psu_prob[u.cluster] * u.mos_ssu / ssu_total)
            .collect();
        for v in &k {
            assert!((v / k[0] - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn rao_wu_variance_matches_linearization() {
    let cfg = PopulationConfig::new(5_000, 20, 10, 25, 250.0, 0.3, Scenario::Lin);
    let pop = generate_population(&cfg, 7).unwrap();
    let s = draw_reference_sample(&pop, 3, 5, &mut rng(0, Stage::ReferenceSample)).unwrap();
    let x = |r: &ReferenceRow| r.x[0];

    let wsum: f64 = s.rows.iter().map(|r| r.weight).sum();
    let mean = s.rows.iter().map(|r| r.weight * x(r)).sum::<f64>() / wsum;
    // With-replacement linearization variance of the weighted mean.
    let mut v_lin = 0.0;
    for psus in s.psu_per_stratum.values() {
        let z: Vec<f64> = psus
            .iter()
            .map(|&p| {
                s.rows
                    .iter()
                    .filter(|r| r.psu == p)
                    .map(|r| r.weight * (x(r) - mean) / wsum)
                    .sum()
            })
            .collect();
        let m = z.len() as f64;
        let zbar = z.iter().sum::<f64>() / m;
        v_lin += m / (m - 1.0) * z.iter().map(|v| (v - zbar).powi(2)).sum::<f64>();
    }

    let reps = 4_000;
    let boot: Vec<f64> = (0..reps)
        .map(|b| {
            let rep = rao_wu_bootstrap(&s, 5_000.0, &mut stream_rng(3, StreamKey::new(0, b, 0, Stage::RaoWu))).unwrap();
            rep.rows.iter().map(|r| r.weight * r.x[0]).sum::<f64>() / rep.weight_sum()
        })
        .collect();
    let bm = boot.iter().sum::<f64>() / reps as f64;
    let v_boot = boot.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let ratio = v_boot / v_lin;
    assert!((0.85..1.15).contains(&ratio), "bootstrap/linearized variance {ratio}");
}

#[test]
fn rao_wu_replicate_sums_to_population_size() {
    let cfg = PopulationConfig::new(2_000, 8, 10, 25, 100.0, 0.3, Scenario::Lin);
    let pop = generate_population(&cfg, 8).unwrap();
    let s = draw_reference_sample(&pop, 2, 5, &mut rng(1, Stage::ReferenceSample)).unwrap();
    for b in 0..50 {
        let rep = rao_wu_bootstrap(&s, 2_000.0, &mut stream_rng(4, StreamKey::new(0, b, 0, Stage::RaoWu))).unwrap();
        assert!((rep.weight_sum() - 2_000.0).abs() < 1e-8);
        // m_h = 2 keeps one PSU per stratum.
        assert_eq!(rep.len(), 8 * 5);
    }
}

#[test]
fn single_psu_stratum_is_reported_by_name() {
    let row = |id, stratum, psu| ReferenceRow { unit_id: id, stratum, psu, weight: 2.0, x: vec![id as f64] };
    let rows = vec![row(0, 0, 0), row(1, 0, 1), row(2, 1, 2), row(3, 1, 2)];
    let s = ProbabilitySample::from_rows(rows, vec!["north".into(), "south".into()]).unwrap();
    let err = rao_wu_bootstrap(&s, 8.0, &mut rng(0, Stage::RaoWu)).unwrap_err();
    match &err {
        Error::SinglePsuStratum { stratum, count } => {
            assert_eq!(stratum, "south");
            assert_eq!(*count, 1);
        }
        e => panic!("unexpected error {e}"),
    }
    assert!(err.to_string().contains("south"));
}
