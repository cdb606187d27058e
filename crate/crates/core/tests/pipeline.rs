//! End-to-end runs of the experiment pipeline in all three modes.

use std::fmt::Write as _;

use mks_core::data::{generate_synthetic, SYNTH_SIGMA1, SYNTH_SIGMA2};
use mks_core::experiment::{
    emit_results, load_results, report_volume_ratio, run_experiment, run_experiment_with_log, Metadata, Method, Mode,
    OutputFormat, RunConfig,
};
use mks_core::ErrorClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_synth(methods: &[Method]) -> RunConfig {
    RunConfig {
        n: 1200,
        methods: methods.to_vec(),
        alphas: vec![0.1, 0.05],
        seeds: vec![0, 1],
        mc_samples: 20_000,
        ..RunConfig::default()
    }
}

#[test]
fn synthetic_noise_has_the_stated_covariance() {
    let n = 50_000;
    let ds = generate_synthetic(n, 4).unwrap();
    // residuals about the known regression function
    let (mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0);
    for (x, y) in ds.features.rows().zip(ds.targets.rows()) {
        let m = mks_core::data::synthetic_mean(x[0]);
        let (e1, e2) = (y[0] - m[0], y[1] - m[1]);
        s11 += e1 * e1;
        s22 += e2 * e2;
        s12 += e1 * e2;
    }
    let (v1, v2, c) = (s11 / n as f64, s22 / n as f64, s12 / n as f64);
    let target1 = SYNTH_SIGMA1 * SYNTH_SIGMA1;
    assert!((v1 / target1 - 1.0).abs() < 0.1, "Var(e1) = {v1}");
    // z2 + z1²/2 has variance σ2² + σ1⁴/2 and is uncorrelated with z1
    let target2 = SYNTH_SIGMA2 * SYNTH_SIGMA2 + 0.5 * target1 * target1;
    assert!((v2 / target2 - 1.0).abs() < 0.1, "Var(e2) = {v2}, expected {target2}");
    assert!(c.abs() < 0.002, "Cov(e1, e2) = {c}");
}

#[test]
fn full_run_is_deterministic() {
    let cfg = small_synth(&Method::ALL);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4 * 2 * 2);
    for r in &a {
        assert_eq!(r.dim, 2);
        assert!((0.0..=1.0).contains(&r.coverage));
        assert!(r.volume.is_finite() && r.volume > 0.0);
        assert!(r.wsc.is_some());
        assert!(r.runtime_ms.is_none());
    }
    // tighter alpha never shrinks a region
    for m in Method::ALL {
        for seed in [0, 1] {
            let v = |alpha: f64| {
                a.iter().find(|r| r.method == m && r.seed == seed && r.alpha == alpha).unwrap().volume
            };
            assert!(v(0.05) >= v(0.1) * 0.98, "{m:?} seed {seed}");
        }
    }
}

#[test]
fn log_reports_every_seed() {
    let cfg = small_synth(&[Method::Mks]);
    let mut lines = Vec::new();
    let out = run_experiment_with_log(&cfg, &mut |l| lines.push(l.to_string())).unwrap();
    assert_eq!(out.resolved.len(), 2);
    assert!(out.resolved.iter().all(|r| r.gamma.unwrap() > 0.0 && r.lengthscale == Some(0.5)));
    assert!(!lines.is_empty());
}

#[test]
fn closed_form_and_monte_carlo_volumes_agree() {
    let mut cfg = small_synth(&[Method::Mahalanobis, Method::Bonferroni]);
    cfg.mc_samples = 200_000;
    let exact = run_experiment(&cfg).unwrap();
    cfg.force_mc = true;
    let mc = run_experiment(&cfg).unwrap();
    for (a, b) in exact.iter().zip(&mc) {
        assert_eq!((a.method, a.seed, a.alpha), (b.method, b.seed, b.alpha));
        assert_eq!(a.coverage, b.coverage);
        assert!((a.volume / b.volume - 1.0).abs() < 0.03, "{:?}: {} vs {}", a.method, a.volume, b.volume);
    }
}

#[test]
fn baseline_volumes_match_published_scale() {
    // Closed-form volumes make the full-size benchmark cheap for these two.
    let cfg = RunConfig {
        methods: vec![Method::Bonferroni, Method::Mahalanobis],
        alphas: vec![0.1],
        seeds: (0..3).collect(),
        ..RunConfig::default()
    };
    let res = run_experiment(&cfg).unwrap();
    let mean = |m: Method| {
        let v: Vec<f64> = res.iter().filter(|r| r.method == m).map(|r| r.volume).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (bonf, maha) = (mean(Method::Bonferroni), mean(Method::Mahalanobis));
    assert!((bonf - 4.13745).abs() < 0.12, "Bonferroni volume {bonf}");
    assert!((maha - 2.82308).abs() < 0.10, "Mahalanobis volume {maha}");
    for r in &res {
        assert!((r.coverage - 0.9).abs() < 0.015, "{:?} coverage {}", r.method, r.coverage);
    }
}

fn write_residuals(path: &std::path::Path, n_cal: usize, n_test: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut s = String::from("split,e1,e2,e3\n");
    for i in 0..n_cal + n_test {
        let split = if i < n_cal { "cal" } else { "test" };
        let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        writeln!(s, "{split},{},{},{}", z[0], 0.5 * z[0] + 0.3 * z[1], z[2].abs()).unwrap();
    }
    s.push_str("cal,NaN,1,1\n");
    std::fs::write(path, s).unwrap();
}

#[test]
fn residual_mode_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("res.csv");
    write_residuals(&path, 400, 400);
    let cfg = RunConfig {
        mode: Mode::Residuals,
        residuals_path: Some(path),
        alphas: vec![0.1],
        mc_samples: 20_000,
        ..RunConfig::default()
    };
    let out = run_experiment_with_log(&cfg, &mut |_| {}).unwrap();
    assert_eq!(out.dropped_rows, 1);
    assert_eq!(out.records.len(), 4);
    for r in &out.records {
        assert_eq!(r.dim, 3);
        assert!(r.wsc.is_none());
        assert!((r.coverage - 0.9).abs() < 0.06, "{:?} coverage {}", r.method, r.coverage);
    }
    let rows = report_volume_ratio(&out.records).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].ratio > 0.0);
}

fn write_table(path: &std::path::Path, n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = String::from("a,b,label,y1,y2\n");
    for i in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.random_range(-1.0..1.0);
        let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let y1 = 2.0 * a - b + 0.3 * e[0];
        let y2 = a * b + 0.2 * (e[0] + e[1]);
        if i == 7 {
            writeln!(s, "{a},,row{i},{y1},{y2}").unwrap();
        } else {
            writeln!(s, "{a},{b},row{i},{y1},{y2}").unwrap();
        }
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn csv_mode_run_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("table.csv");
    write_table(&data, 600);
    let cfg = RunConfig {
        mode: Mode::Csv,
        data_path: Some(data),
        feature_cols: vec!["a".into(), "b".into()],
        target_cols: vec!["y1".into(), "y2".into()],
        alphas: vec![0.1, 0.05],
        seeds: vec![3],
        mc_samples: 20_000,
        ..RunConfig::default()
    };
    let out = run_experiment_with_log(&cfg, &mut |_| {}).unwrap();
    assert_eq!(out.dropped_rows, 1);
    assert_eq!(out.records.len(), 8);
    assert!(out.records.iter().all(|r| r.dataset == "table" && r.wsc.is_some()));

    for format in [OutputFormat::Csv, OutputFormat::Json] {
        let path = dir.path().join(match format {
            OutputFormat::Csv => "out.csv",
            OutputFormat::Json => "out.json",
        });
        let meta = Metadata {
            dataset: cfg.dataset_name(),
            dim: 2,
            config: Some(cfg.clone()),
            resolved: out.resolved.clone(),
            dropped_rows: out.dropped_rows,
        };
        emit_results(&out.records, meta, format, &path).unwrap();
        let back = load_results(&path).unwrap();
        assert_eq!(back.len(), out.records.len());
        for (a, b) in back.iter().zip(&out.records) {
            assert_eq!((a.method, a.seed, a.alpha), (b.method, b.seed, b.alpha));
            assert!((a.volume - b.volume).abs() <= 1e-12 * b.volume);
            assert!((a.coverage - b.coverage).abs() <= 1e-12);
        }
    }
}

#[test]
fn missing_column_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("table.csv");
    write_table(&data, 50);
    let cfg = RunConfig {
        mode: Mode::Csv,
        data_path: Some(data),
        feature_cols: vec!["a".into(), "nope".into()],
        target_cols: vec!["y1".into()],
        ..RunConfig::default()
    };
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
}
