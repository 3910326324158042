use std::fs;
use std::path::Path;

use pathforge::harness::*;
use pathforge::par::Execution;
use pathforge::student::PriorScenario;

fn golden_rows() -> Vec<CurveRow> {
    let row = |epoch, split: &str, mean_return, n_episodes| CurveRow {
        run_id: "abc-3".into(),
        seed: 3,
        epoch,
        split: split.into(),
        mean_return,
        n_episodes,
    };
    vec![row(1, "train", 1.5, 5), row(1, "test", 2.25, 20), row(2, "pretrain", -0.125, 8)]
}

#[test]
fn curve_csv_matches_the_golden_file() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/curve_golden.csv");
    let mut bytes = Vec::new();
    write_curve_csv(&mut bytes, &golden_rows()).unwrap();
    assert_eq!(String::from_utf8(bytes).unwrap(), fs::read_to_string(&golden).unwrap());
    assert_eq!(read_curve_csv(&golden).unwrap(), golden_rows());
    assert!(fs::read_to_string(&golden).unwrap().starts_with(CURVE_HEADER));
}

#[test]
fn curve_csv_rejects_a_foreign_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.csv");
    fs::write(&p, "run,seed\nx,1\n").unwrap();
    assert!(read_curve_csv(&p).is_err());
}

#[test]
fn config_hash_ignores_key_order_and_whitespace() {
    let a = ExperimentConfig::from_json(r#"{"policy":"cmab","scenario":"decreasing_exp","label":"x"}"#).unwrap();
    let b = ExperimentConfig::from_json("{ \"label\": \"x\",\n \"scenario\": \"decreasing_exp\", \"policy\": \"cmab\" }").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
    let c = ExperimentConfig::from_json(r#"{"policy":"cmab","scenario":"uniform","label":"x"}"#).unwrap();
    assert_ne!(a.hash(), c.hash());
    assert!(ExperimentConfig::from_json(r#"{"polcy":"cmab"}"#).is_err());
}

#[test]
fn unknown_policy_and_scenario_are_reported() {
    let e = PolicyKind::from_cli_name("dqn").unwrap_err().to_string();
    for p in PolicyKind::ALL {
        assert!(e.contains(p.cli_name()), "{e}");
    }
    assert!(parse_scenario("sometimes").is_err());
    assert_eq!(parse_scenario("decexp").unwrap(), PriorScenario::DecreasingExp);
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let mut cfg = ExperimentConfig {
        scenario: Some(PriorScenario::None),
        ..ExperimentConfig::default()
    };
    assert!(cfg.validate().is_err(), "gnn without checkpoint");
    cfg.checkpoint = Some("/nonexistent/ckpt.bin".into());
    assert!(cfg.validate().is_err(), "missing checkpoint file");
    cfg.policy = PolicyKind::Cmab;
    cfg.scenario = None;
    assert!(cfg.validate().is_err(), "no scenario");
    cfg.stage = Stage::Pretrain;
    assert!(cfg.validate().is_err(), "pretrain of a baseline");
}

fn baseline(policy: PolicyKind, scenario: PriorScenario) -> ExperimentConfig {
    ExperimentConfig {
        policy,
        scenario: Some(scenario),
        ..ExperimentConfig::default()
    }
}

fn dataset() -> Dataset {
    Dataset::synthetic(8, 0).unwrap()
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset();
    data.write(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.sequential.len(), data.sequential.len());
    assert_eq!(back.grid.n_docs(), 22);
    let err = Dataset::load(&dir.path().join("missing")).unwrap_err().to_string();
    assert!(err.contains("generate-data"), "{err}");
}

#[test]
fn finished_runs_are_skipped_unless_forced() {
    let out = tempfile::tempdir().unwrap();
    let data = dataset();
    let cfg = baseline(PolicyKind::Random, PriorScenario::None);
    let first = run_experiment(&cfg, &data, 4, out.path(), false, Execution::Sequential).unwrap();
    assert!(!first.skipped);
    assert_eq!(first.dir, out.path().join("runs").join(cfg.hash()).join("4"));
    for f in ["curve.csv", "record.json"] {
        assert!(first.dir.join(f).exists(), "{f}");
    }
    let curve = fs::read(first.dir.join("curve.csv")).unwrap();
    fs::write(first.dir.join("curve.csv"), "tampered").unwrap();
    let again = run_experiment(&cfg, &data, 4, out.path(), false, Execution::Sequential).unwrap();
    assert!(again.skipped);
    assert_eq!(again.record, first.record);
    assert_eq!(fs::read(first.dir.join("curve.csv")).unwrap(), b"tampered");
    let forced = run_experiment(&cfg, &data, 4, out.path(), true, Execution::Sequential).unwrap();
    assert!(!forced.skipped);
    assert_eq!(fs::read(first.dir.join("curve.csv")).unwrap(), curve, "rerun is byte-identical");
}

#[test]
fn seeds_do_not_influence_each_other() {
    let data = dataset();
    let cfg = baseline(PolicyKind::Cmab, PriorScenario::Uniform);
    let together = tempfile::tempdir().unwrap();
    let alone = tempfile::tempdir().unwrap();
    for r in run_seeds(&cfg, &data, &[0, 1, 2], together.path(), false, Execution::from_threads(3)) {
        r.unwrap();
    }
    run_seeds(&cfg, &data, &[1], alone.path(), false, Execution::Sequential)[0].as_ref().unwrap();
    let a = fs::read(cfg.run_dir(together.path(), 1).join("curve.csv")).unwrap();
    let b = fs::read(cfg.run_dir(alone.path(), 1).join("curve.csv")).unwrap();
    assert_eq!(a, b);
    let c = fs::read(cfg.run_dir(together.path(), 0).join("curve.csv")).unwrap();
    assert_ne!(a, c);
}

fn record(label: &str, scenario: Option<PriorScenario>, seed: u64, final_return: f64) -> RunRecord {
    RunRecord {
        run_id: format!("h-{seed}"),
        config_hash: "h".into(),
        seed,
        label: label.into(),
        stage: if scenario.is_some() { Stage::Finetune } else { Stage::Pretrain },
        policy: PolicyKind::Cmab,
        scenario,
        started_unix: 0,
        elapsed_secs: 0.0,
        test_means: vec![final_return],
        final_return,
        pretrain: None,
        config: ExperimentConfig::default(),
    }
}

#[test]
fn summary_groups_by_policy_and_scenario() {
    use PriorScenario::*;
    let records = vec![
        record("cmab", Some(None), 0, 1.0),
        record("cmab", Some(Uniform), 0, 10.0),
        record("cmab", Some(None), 1, 2.0),
        record("cmab", Some(None), 2, 6.0),
        record("cmab", Some(Uniform), 1, 10.0),
        record("oracle", Some(DecreasingExp), 0, 4.0),
        record("pretrain-full", Option::None, 0, 99.0),
    ];
    let rows = summarize_records(&records, 0).unwrap();
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r.policy.as_str(), r.scenario.as_str())).collect();
    assert_eq!(keys, [("cmab", "none"), ("cmab", "uniform"), ("oracle", "decexp")]);
    assert_eq!(rows[0].n_seeds, 3);
    assert!((rows[0].mean - 3.0).abs() < 1e-12);
    assert!((rows[0].sd - 7f64.sqrt()).abs() < 1e-12);
    assert_eq!((rows[1].mean, rows[1].sd, rows[1].ci_lo, rows[1].ci_hi), (10.0, 0.0, 10.0, 10.0));
    assert_eq!(rows[0].reference_mean, Some(18.34));
    assert_eq!(rows[2].reference_mean, Option::None);
    let table = format_table(&rows);
    assert!(table.contains("3.00 (2.65)"), "{table}");
}

#[test]
fn summarizing_nothing_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(summarize(dir.path()).is_err());
    assert!(summarize(&dir.path().join("absent")).is_err());
    assert!(summarize_records(&[record("p", Option::None, 0, 1.0)], 0).is_err());
}

#[test]
fn bootstrap_edge_cases() {
    let mut rng = bootstrap_rng(0);
    let flat = bootstrap_ci(&[5.0; 4], 1000, 0.95, &mut rng);
    assert!(flat.degenerate);
    assert_eq!((flat.lo, flat.mean, flat.hi), (5.0, 5.0, 5.0));
    assert!(bootstrap_ci(&[1.0], 1000, 0.95, &mut rng).degenerate);

    let xs = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
    let a = bootstrap_ci(&xs, 2000, 0.95, &mut bootstrap_rng(9));
    let b = bootstrap_ci(&xs, 2000, 0.95, &mut bootstrap_rng(9));
    assert_eq!(a, b);
    assert!(a.lo < a.mean && a.mean < a.hi && !a.degenerate);
    let shifted: Vec<f64> = xs.iter().map(|x| x + 100.0).collect();
    let s = bootstrap_ci(&shifted, 2000, 0.95, &mut bootstrap_rng(9));
    assert!((s.lo - a.lo - 100.0).abs() < 1e-9 && (s.hi - a.hi - 100.0).abs() < 1e-9);
}

#[test]
fn seed_ranges() {
    assert_eq!(parse_seeds("0..3").unwrap(), [0, 1, 2]);
    assert_eq!(parse_seeds("2..=4").unwrap(), [2, 3, 4]);
    assert_eq!(parse_seeds("7").unwrap(), [7]);
    assert!(parse_seeds("3..3").is_err());
    assert!(parse_seeds("1,1").is_err());
}
