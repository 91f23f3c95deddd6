//! End-to-end runs of the `koop` binary.

use std::path::Path;
use std::process::{Command, Output};

fn koop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koop")).args(args).env_remove("KOOP_THREADS").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// First stderr line is the effective-config banner.
fn banner(o: &Output) -> serde_json::Value {
    let text = stderr(o);
    serde_json::from_str(text.lines().next().expect("banner line")).expect("banner is JSON")
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let o = koop(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn help_exits_0_and_bad_flags_exit_1() {
    assert_eq!(koop(&["--help"]).status.code(), Some(0));
    let o = koop(&["gen-well", "--out", "x.kds", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn invalid_thread_cap_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_koop"))
        .args(["inspect", "--ckpt", "x"])
        .env("KOOP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("KOOP_THREADS"));
}

#[test]
fn missing_files_exit_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.kck");
    let o = koop(&["inspect", "--ckpt", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
}

#[test]
fn gen_well_is_deterministic_and_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.kds");
    let b = dir.path().join("b.kds");
    let oa = koop(&["gen-well", "--steps", "1000", "--seed", "7", "--out", p(&a)]);
    assert_eq!(oa.status.code(), Some(0), "{}", stderr(&oa));
    let ob = koop(&["gen-well", "--steps", "1000", "--seed", "7", "--out", p(&b)]);
    assert_eq!(ob.status.code(), Some(0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(&a).unwrap().len(), 32 + 1000 * 12);
    let v = banner(&oa);
    assert_eq!(v["command"], "gen-well");
    assert_eq!(v["threads"], 1);
    assert_eq!(v["generator"]["seed"], 7);
    assert_eq!(v["generator"]["control_range"], serde_json::json!([-5.0, 5.0]));
}

#[test]
fn train_predict_eval_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("well.kds");
    assert!(koop(&["gen-well", "--steps", "3000", "--seed", "1", "--out", p(&data)]).status.success());
    let config = dir.path().join("train.json");
    std::fs::write(
        &config,
        r#"{"total_steps": 40, "batch_size": 16, "n_start": 2, "n_end": 4, "eval_every": 20, "val_windows": 16}"#,
    )
    .unwrap();

    let mut ckpts = Vec::new();
    for kind in ["traditional", "convex", "extended"] {
        let ckpt = dir.path().join(format!("{kind}.kck"));
        let losses = dir.path().join(format!("{kind}.csv"));
        let o = koop(&[
            "train",
            "--model",
            kind,
            "--data",
            p(&data),
            "--config",
            p(&config),
            "--out",
            p(&ckpt),
            "--arch",
            "tiny",
            "--loss-csv",
            p(&losses),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v = banner(&o);
        assert_eq!(v["train_config"]["total_steps"], 40);
        assert_eq!(v["train_config"]["lambda_cyc"], 1.0);
        assert_eq!(v["model_config"]["kind"], kind);
        let rows = std::fs::read_to_string(&losses).unwrap();
        assert_eq!(rows.lines().next().unwrap(), "step,n,dynamics,cyc,bound,total,val_rms");
        assert_eq!(rows.lines().count(), 41);
        ckpts.push(ckpt);
    }

    let o = koop(&["inspect", "--ckpt", p(&ckpts[2])]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["config"]["kind"], "extended");
    assert_eq!(v["training"]["steps"], 40);

    let csv = dir.path().join("rollout.csv");
    let svg = dir.path().join("rollout.svg");
    let mut args = vec!["predict"];
    for c in &ckpts {
        args.extend(["--ckpt", p(c)]);
    }
    args.extend(["--data", p(&data), "--start-index", "2500", "--horizon", "50", "--csv", p(&csv), "--svg", p(&svg)]);
    let o = koop(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert_eq!(
        text.lines().next().unwrap(),
        "t,true_pos,pred_pos_traditional,pred_pos_convex,pred_pos_extended,control"
    );
    assert!(std::fs::read_to_string(&svg).unwrap().contains("viewBox=\"0 0 960 480\""));

    let mut args = vec!["eval"];
    for c in &ckpts {
        args.extend(["--ckpt", p(c)]);
    }
    args.extend(["--data", p(&data), "--windows", "5", "--horizon", "30"]);
    let o = koop(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    assert_eq!(report.lines().count(), 4, "{report}");
    assert!(report.lines().nth(3).unwrap().contains(",extended,0.5,30,5,"));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("well.kds");
    assert!(koop(&["gen-well", "--steps", "500", "--out", p(&data)]).status.success());
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"learning_rate": 0.1}"#).unwrap();
    let out = dir.path().join("m.kck");
    let o = koop(&["train", "--model", "convex", "--data", p(&data), "--config", p(&config), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}
