use std::fs;
use std::path::Path;

use npinfer::harness::simulate::{export_iteration, read_estimates, summarize};
use npinfer::harness::{run_estimate, run_simulation, EstimateConfig, RawConfig, SimConfig};
use npinfer::metrics::compute_metrics;
use npinfer::{Error, IterationEstimate, Method, Outcome, PmDesign, QrDesign};

fn small() -> SimConfig {
    SimConfig {
        n_total: 600,
        strata: 5,
        clusters_per_stratum: 6,
        cluster_size: 20,
        n_a: 60,
        n_r: 40,
        m_h: 2,
        n_hj: 4,
        b: 4,
        l: 2,
        k: 3,
        methods: vec![Method::FwR, Method::UwA, Method::Ipsw, Method::Gppp, Method::Aipw],
        workers: 1,
        seed: 11,
        ..SimConfig::desk()
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn summary_matches_metrics_recomputed_from_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_simulation(&small(), dir.path()).unwrap();
    let lines = read_estimates(&dir.path().join("estimates.csv")).unwrap();
    assert_eq!(lines.len(), 3 * 5);

    for method in ["UW_A", "FW_R", "IPSW", "GPPP", "AIPW"] {
        let mine: Vec<_> = lines.iter().filter(|l| l.method == method).collect();
        let est: Vec<IterationEstimate> = mine.iter().map(|l| l.estimate).collect();
        let m = compute_metrics(&est, mine[0].truth).unwrap();
        let row = report
            .summaries
            .get(&Outcome::Continuous)
            .unwrap()
            .iter()
            .find(|r| r.method == method)
            .unwrap();
        assert_eq!(row.metrics.k, 3);
        assert!((row.metrics.rbias - m.rbias).abs() < 1e-9, "{method}");
        assert!((row.metrics.rmse - m.rmse).abs() < 1e-9, "{method}");
        assert_eq!(row.metrics.crci, m.crci);
    }
    let again = summarize(&lines, Outcome::Continuous).unwrap();
    assert_eq!(again.len(), report.summaries[&Outcome::Continuous].len());
    assert!(read(&dir.path().join("summary.csv")).starts_with("method,scenario,qr_spec,pm_spec"));
}

#[test]
fn interrupted_run_resumes_to_the_same_output() {
    let cfg = small();
    let full = tempfile::tempdir().unwrap();
    run_simulation(&cfg, full.path()).unwrap();

    let part = tempfile::tempdir().unwrap();
    run_simulation(&cfg, part.path()).unwrap();
    // Pretend the run died after iteration 0, mid-way through writing a row.
    fs::write(part.path().join("completed.txt"), "0\n").unwrap();
    let mut est = read(&part.path().join("estimates.csv"));
    est.push_str("2,LIN,contin");
    fs::write(part.path().join("estimates.csv"), est).unwrap();

    let report = run_simulation(&cfg, part.path()).unwrap();
    assert_eq!((report.iterations_resumed, report.iterations_run), (1, 2));
    for f in ["estimates.csv", "summary.csv"] {
        assert_eq!(read(&full.path().join(f)), read(&part.path().join(f)), "{f}");
    }
}

#[test]
fn resuming_with_a_different_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.k = 1;
    run_simulation(&cfg, dir.path()).unwrap();
    cfg.seed += 1;
    assert!(matches!(run_simulation(&cfg, dir.path()), Err(Error::Config(_))));
}

#[test]
fn worker_count_does_not_change_output() {
    let mut cfg = small();
    let a = tempfile::tempdir().unwrap();
    run_simulation(&cfg, a.path()).unwrap();
    cfg.workers = 3;
    let b = tempfile::tempdir().unwrap();
    run_simulation(&cfg, b.path()).unwrap();
    for f in ["estimates.csv", "summary.csv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn estimate_mode_reproduces_the_simulated_iteration() {
    let mut cfg = small();
    cfg.k = 1;
    cfg.methods = vec![Method::UwA, Method::Ipsw, Method::Gppp, Method::Aipw];
    cfg.pm_specs = vec![PmDesign::Misspecified];
    let sim = tempfile::tempdir().unwrap();
    run_simulation(&cfg, sim.path()).unwrap();
    let lines = read_estimates(&sim.path().join("estimates.csv")).unwrap();

    let files = tempfile::tempdir().unwrap();
    let (reference, sample) = export_iteration(&cfg, 0, files.path()).unwrap();
    let text = "N = 600\ncovariates = x\nB = 4\nL = 2\nmethods = UW_A, IPSW, GPPP, AIPW\n\
                qr_spec = true\npm_spec = false\nseed = 11\nworkers = 1\n";
    let ecfg = EstimateConfig::from_raw(&RawConfig::parse(text).unwrap()).unwrap();
    assert_eq!(ecfg.qr_specs, vec![QrDesign::True]);
    let out = tempfile::tempdir().unwrap();
    let results = run_estimate(&reference, &sample, &ecfg, out.path()).unwrap();

    for (slot, est) in results {
        let est = est.unwrap();
        let line = lines
            .iter()
            .find(|l| l.method == slot.method.to_string() && l.pm_spec == slot.pm_label())
            .unwrap();
        let rel = (est.point - line.estimate.value).abs() / line.estimate.value.abs();
        assert!(rel < 1e-9, "{}: {} vs {}", slot.method, est.point, line.estimate.value);
        assert!((est.variance / line.estimate.variance - 1.0).abs() < 1e-6);
    }
    assert!(read(&out.path().join("estimates.csv")).starts_with("method,qr_spec,pm_spec"));
}

#[test]
fn config_text_round_trips() {
    let mut cfg = small();
    cfg.qr_specs = vec![QrDesign::True, QrDesign::Misspecified];
    cfg.ignore_design = true;
    let back = SimConfig::from_raw(&RawConfig::parse(&cfg.to_text()).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn inconsistent_design_sizes_are_config_errors() {
    let mut cfg = small();
    cfg.n_r = 41;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let text = small().to_text().replace("N = 600", "N = 601");
    assert!(matches!(SimConfig::from_raw(&RawConfig::parse(&text).unwrap()), Err(Error::Config(_))));
}
