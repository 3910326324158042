use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pathforge(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathforge"))
        .args(args)
        .env("PATHFORGE_DATA_DIR", data)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn baseline_run_summarize_and_bootstrap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();

    let g = pathforge(&data, &["generate-data", "--embedding-dim", "8"]);
    assert!(g.status.success(), "{}", stderr(&g));
    assert!(data.join("grid.json").exists());
    assert!(!pathforge(&data, &["generate-data"]).status.success(), "refuses to overwrite");

    let args = ["baseline", "--policy", "oracle", "--scenario", "none", "--seeds", "0..3", "--out", out_s, "--parallel", "2"];
    let run = pathforge(&data, &args);
    assert!(run.status.success(), "{}", stderr(&run));
    assert_eq!(stdout(&run).lines().filter(|l| l.contains("final return 33.000")).count(), 3);
    let again = pathforge(&data, &args);
    assert_eq!(stdout(&again).matches("skipped").count(), 3);

    let runs: Vec<_> = fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run_dir = runs[0].as_ref().unwrap().path().join("1");
    let curve = fs::read_to_string(run_dir.join("curve.csv")).unwrap();
    assert!(curve.starts_with("run_id,seed,epoch,split,mean_return,n_episodes\n"));
    assert!(run_dir.join("record.json").exists());

    let csv = tmp.path().join("summary.csv");
    let s = pathforge(&data, &["summarize", "--out", out_s, "--csv", csv.to_str().unwrap()]);
    assert!(s.status.success(), "{}", stderr(&s));
    assert!(stdout(&s).contains("33.00 (0.00)"), "{}", stdout(&s));
    assert!(fs::read_to_string(&csv).unwrap().contains("oracle,none,3,33"));

    let b = pathforge(&data, &["bootstrap", "--input", run_dir.join("curve.csv").to_str().unwrap(), "--resamples", "200"]);
    assert!(b.status.success(), "{}", stderr(&b));
    assert!(stdout(&b).contains("degenerate"), "{}", stdout(&b));
    let bands = pathforge(&data, &["bootstrap", "--input", out_s, "--resamples", "200"]);
    assert!(stdout(&bands).starts_with("policy,scenario,epoch,"), "{}", stdout(&bands));
}

#[test]
fn bad_invocations_fail_with_a_reason() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("nowhere");
    let bad_policy = pathforge(&data, &["baseline", "--policy", "dqn", "--scenario", "none"]);
    assert!(!bad_policy.status.success());
    assert!(stderr(&bad_policy).contains("ppo-mlp"), "{}", stderr(&bad_policy));

    let wrong_stage = pathforge(&data, &["finetune", "--policy", "cmab", "--scenario", "none"]);
    assert!(stderr(&wrong_stage).contains("gnn-scratch"), "{}", stderr(&wrong_stage));

    let no_ckpt = pathforge(&data, &["finetune", "--policy", "gnn", "--scenario", "none"]);
    assert!(stderr(&no_ckpt).contains("checkpoint"), "{}", stderr(&no_ckpt));

    let no_data = pathforge(&data, &["baseline", "--policy", "random", "--scenario", "uniform", "--seeds", "0"]);
    assert!(!no_data.status.success());
    assert!(stderr(&no_data).contains("generate-data"), "{}", stderr(&no_data));

    let empty = pathforge(&data, &["summarize", "--out", tmp.path().to_str().unwrap()]);
    assert!(!empty.status.success());
}
