use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use shockbench::harness::{
    evaluate, evaluate_block, evaluate_to_dir, generate, oracle_predictions, read_manifest, read_report, sha256_hex,
    train_ref, write_predictions, write_report_csv, Experiment, ExperimentConfig, ForecasterSource, OracleKind, Payload,
    PredictionRecord, Stamp, StampPolicy, EMPTY_CELL, TABLE_METRICS,
};
use shockbench::rng::{standard_normal, stream_rng};
use shockbench::titration::{Split, WindowSet};
use shockbench::Error;

fn config(sigmas: &[f64]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new("DOUBLEWELL_BASE", sigmas);
    cfg.n_steps = Some(8000);
    cfg.context_len = 32;
    cfg.horizons = vec![8];
    cfg
}

fn test_set(sigma: f64) -> WindowSet {
    Experiment::new(config(&[sigma])).unwrap().windows(sigma, 8, Split::Test).unwrap()
}

#[test]
fn generate_writes_hashed_files_and_evaluation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(config(&[0.25, 1.0])).unwrap();
    let manifest = generate(&exp, dir.path()).unwrap();
    assert_eq!(manifest.files.len(), 3);
    for (rel, digest) in &manifest.files {
        assert_eq!(&sha256_hex(&fs::read(dir.path().join(rel)).unwrap()), digest, "{rel}");
    }
    assert_eq!(read_manifest(&dir.path().join("manifest.json")).unwrap(), manifest);

    let (reports, paths) = evaluate_to_dir(&exp, dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    let first: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
    evaluate_to_dir(&exp, dir.path()).unwrap();
    let second: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, second);

    assert_eq!(read_report(&paths[0]).unwrap(), reports[0]);
    for b in &reports[0].blocks {
        assert_eq!(b.windows_evaluated + b.windows_missing, b.windows_total);
        assert_eq!(b.form, "mean_std");
    }
}

#[test]
fn evaluation_refuses_a_manifest_from_other_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    generate(&Experiment::new(config(&[0.25])).unwrap(), dir.path()).unwrap();
    let mut other = config(&[0.25]);
    other.n_steps = Some(8001);
    let err = evaluate_to_dir(&Experiment::new(other).unwrap(), dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format(ref m) if m.contains("does not match")), "{err}");
}

#[test]
fn missing_predictions_are_counted_until_too_many() {
    let set = test_set(0.5);
    let policy = StampPolicy::default();
    let mut preds = oracle_predictions(OracleKind::TrueLaw, &set);
    let total = preds.len();
    let drop = total / 50;
    preds.truncate(total - drop);
    let block = evaluate_block(&set, &preds, &policy).unwrap();
    assert_eq!(block.windows_total, total);
    assert_eq!(block.windows_missing, drop);
    assert_eq!(block.windows_evaluated + block.windows_missing, block.windows_total);
    assert!(block.notes.iter().any(|n| n.contains("had no prediction")));

    preds.truncate(total * 9 / 10);
    let err = evaluate_block(&set, &preds, &policy).unwrap_err();
    assert!(err.to_string().contains("below the required 95%"), "{err}");
}

#[test]
fn predictions_for_unknown_windows_or_mixed_forms_are_rejected() {
    let set = test_set(0.5);
    let policy = StampPolicy::default();
    let mut preds = oracle_predictions(OracleKind::TrueLaw, &set);
    preds[3].window_id = "r9-test-99999".into();
    let err = evaluate_block(&set, &preds, &policy).unwrap_err();
    assert!(err.to_string().contains("r9-test-99999"));

    let mut preds = oracle_predictions(OracleKind::TrueLaw, &set);
    let Payload::MeanStd { mean, .. } = preds[0].payload.clone() else { unreachable!() };
    preds[0].payload = Payload::Ensemble { samples: vec![mean] };
    let err = evaluate_block(&set, &preds, &policy).unwrap_err();
    assert!(err.to_string().contains("mixed prediction forms"));
}

#[test]
fn ensemble_predictions_skip_the_eigenframe_tests() {
    let sigma = 0.5;
    let set = test_set(sigma);
    let mut rng = stream_rng(4, 0);
    // interpolated quantiles of M members cover about nominal·(M-1)/(M+1),
    // so a small ensemble of the true law would itself fail coverage
    let preds: Vec<PredictionRecord> = oracle_predictions(OracleKind::TrueLaw, &set)
        .into_iter()
        .map(|mut p| {
            let Payload::MeanStd { mean, .. } = &p.payload else { unreachable!() };
            let samples = (0..512)
                .map(|_| mean.iter().map(|r| r.iter().map(|m| m + sigma * standard_normal(&mut rng)).collect()).collect())
                .collect();
            p.payload = Payload::Ensemble { samples };
            p
        })
        .collect();
    let block = evaluate_block(&set, &preds, &StampPolicy::default()).unwrap();
    assert_eq!(block.form, "ensemble");
    assert!(block.pit_ks.is_none() && block.mahalanobis_ks.is_none() && block.sw.is_none());
    assert!(block.notes.iter().any(|n| n.contains("skipped")));
    assert_eq!(block.stamp, Stamp::Untested);
    assert!((block.coverage_90 - 0.9).abs() < 0.05, "{}", block.coverage_90);
}

#[test]
fn external_prediction_files_are_scored_per_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&[0.25, 1.0]);
    cfg.horizons = vec![8, 16];
    let exp = Experiment::new(cfg.clone()).unwrap();
    for &h in &cfg.horizons {
        let mut w = BufWriter::new(File::create(dir.path().join(format!("preds_H{h}.jsonl"))).unwrap());
        for &s in &cfg.sigmas {
            let set = exp.windows(s, h, Split::Test).unwrap();
            write_predictions(&mut w, &oracle_predictions(OracleKind::HalfStd, &set)).unwrap();
        }
    }
    cfg.forecaster = ForecasterSource::External { predictions: dir.path().join("preds_H{h}.jsonl") };
    let reports = evaluate(&Experiment::new(cfg).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert!(r.forecaster.starts_with("external:preds_H"));
        assert!(r.blocks.iter().all(|b| b.stamp == Stamp::Fail && b.windows_missing == 0));
        assert!(r.threshold.contains("fails from σ=0.25"), "{}", r.threshold);
    }
}

#[test]
fn checkpoint_forecaster_emits_spectral_beliefs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&[0.25]);
    cfg.noise_realizations = 1;
    cfg.train.max_steps = 30;
    let exp = Experiment::new(cfg.clone()).unwrap();
    let outcome = train_ref(&exp, 0.25, 8).unwrap();
    let ck = dir.path().join("ref.json");
    outcome.model.save(File::create(&ck).unwrap()).unwrap();

    cfg.forecaster = ForecasterSource::RefModel { checkpoint: ck };
    let reports = evaluate(&Experiment::new(cfg.clone()).unwrap()).unwrap();
    let b = &reports[0].blocks[0];
    assert_eq!(b.form, "spectral_belief");
    assert!(b.mahalanobis_ks.is_some() && b.sw.is_some());
    assert!(reports[0].forecaster.ends_with("ref.json"));

    // a checkpoint for another horizon is refused
    cfg.horizons = vec![16];
    let err = evaluate(&Experiment::new(cfg).unwrap()).unwrap_err();
    assert!(err.to_string().contains("checkpoint forecasts H=8"), "{err}");
}

#[test]
fn sweep_table_has_one_row_per_level_and_metric() {
    let sigmas = [0.0, 0.25, 1.0, 2.0];
    let reports = evaluate(&Experiment::new(config(&sigmas)).unwrap()).unwrap();
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &reports).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let table: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|c| TABLE_METRICS.contains(&c[2]))
        .collect();
    assert_eq!(table.len(), 12);
    for (i, row) in table.iter().enumerate() {
        assert_eq!(row[0], "DOUBLEWELL_BASE");
        assert_eq!(row[1].parse::<f64>().unwrap(), sigmas[i / 3]);
        assert_eq!(row[2], TABLE_METRICS[i % 3]);
        assert_eq!(row.len(), 6);
        assert!(row[3..].iter().all(|c| *c == EMPTY_CELL || c.parse::<f64>().is_ok()));
    }
    // the noiseless oracle has zero spread and cannot be calibrated
    assert_eq!(reports[0].blocks[0].stamp, Stamp::Fail);
    assert!(reports[0].blocks[1..].iter().all(|b| b.stamp == Stamp::Pass), "{}", reports[0].threshold);
}

#[test]
fn config_files_parse_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(
        &path,
        r#"
scenario = "OU_PARAM"
sigmas = [0.25, 1.0]
horizons = [16]
noise_realizations = 2

[forecaster]
kind = "oracle"
oracle = { fixed_sigma = 0.5 }

[stamp]
q = 0.1
"#,
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.context_len, 336);
    assert_eq!(cfg.forecaster, ForecasterSource::Oracle { oracle: OracleKind::FixedSigma(0.5) });
    assert_eq!(cfg.stamp.q, 0.1);
    assert_eq!(cfg.stamp.coverage_se, StampPolicy::default().coverage_se);
    assert_eq!(cfg.output_path(Some(Path::new("/tmp/x"))), Path::new("/tmp/x/shockbench-out"));

    fs::write(&path, "scenario = \"KS_BASE\"\nsigmas = [1.0]\n").unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(Error::OutOfScope(_))));
}
