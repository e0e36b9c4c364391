use std::path::Path;
use std::process::{Command, Output};

fn tgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgp")).args(args).output().expect("run tgp")
}

fn write_config(dir: &Path, seed: u64) -> String {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{"model": {{"kind": "tgp", "flow": "sal", "num_inducing": 5}},
            "train": {{"epochs": 30, "seed": {seed}, "init_epochs": 50}},
            "data": {{"path": "data.csv"}},
            "output": {{"dir": "out"}}}}"#
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn synth(dir: &Path) {
    let out = tgp(&["synth", "--spec", "tanh-warped-sine", "--n", "40", "--out", dir.join("data.csv").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = write_config(dir.path(), 0);
    let out = tgp(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = dir.path().join("out/model.json");
    assert!(model.exists() && dir.path().join("out/trace.csv").exists());

    let data = dir.path().join("data.csv");
    let out = tgp(&["evaluate", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["nll_mean", "nll_se", "rmse_mean", "rmse_se", "cov95_mean", "cov95_se", "acc_mean", "acc_se", "folds"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert!(report["nll_mean"].as_f64().unwrap().is_finite());

    let pred = dir.path().join("pred.csv");
    let out = tgp(&["predict", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(pred).unwrap();
    assert_eq!(text.lines().next().unwrap(), "mean,variance,q0.025,q0.975,log_density");
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn fixed_seed_training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = write_config(dir.path(), 3);
    let mut models = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = tgp(&["train", "--config", &cfg, "--seed", "7", "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        models.push(std::fs::read(out_dir.join("model.json")).unwrap());
    }
    assert_eq!(models[0], models[1]);
}

#[test]
fn missing_config_exits_with_one() {
    let out = tgp(&["train", "--config", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_flags_print_usage_and_exit_with_one() {
    let out = tgp(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(tgp(&["--help"]).status.code(), Some(0));
}

#[test]
fn default_grad_check_passes() {
    let out = tgp(&["grad-check"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let err: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn dump_commands_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"kind": "tgp", "flow": "sal", "flow_mode": "input-dependent-ba", "num_inducing": 4, "net": {"hidden": [5]}},
            "train": {"epochs": 5, "init_epochs": 50}, "data": {"path": "data.csv"}}"#,
    )
    .unwrap();
    assert!(tgp(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    let model = dir.path().join("out/model.json");
    let data = dir.path().join("data.csv");
    let warp = dir.path().join("warp.csv");
    let out = tgp(&[
        "dump-warping", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", warp.to_str().unwrap(), "--grid-size", "10", "--samples", "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&warp).unwrap().lines().count(), 1 + 4 * 10);

    let qf0 = dir.path().join("qf0.csv");
    let out = tgp(&["dump-qf0", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", qf0.to_str().unwrap(), "--rows", "0,5,9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&qf0).unwrap().lines().next().unwrap(), "point,mean,cov_0,cov_1,cov_2");
}
