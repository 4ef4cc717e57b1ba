use std::process::{Command, Output};

use serde_json::Value;

fn s2rm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2rm"))
        .args(args)
        .output()
        .unwrap()
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn names(report: &Value) -> Vec<String> {
    report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap().to_string())
        .collect()
}

/// Report with the timing block removed.
fn without_timings(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timings");
    v
}

#[test]
fn check_default_passes_and_reports_every_suite() {
    let out = s2rm(&["check"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(&out);
    assert_eq!(r["command"], "check");
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    let names = names(&r);
    for prefix in [
        "shift.",
        "oracle.",
        "shape.",
        "attention.",
        "gates.",
        "ablation.",
    ] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
    }
    assert!(r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["status"] == "pass"));
}

#[test]
fn check_filter_keeps_shift_laws_only() {
    let r = report(&s2rm(&["check", "--filter", "shift"]));
    let names = names(&r);
    assert_eq!(names.len(), 6);
    assert!(names.iter().all(|n| n.starts_with("shift.")));
}

#[test]
fn config_error_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"height": 100}"#).unwrap();
    let out = s2rm(&["check", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("height"));
    assert!(out.stdout.is_empty());

    std::fs::write(&path, r#"{"decoder": {"stages": 4}}"#).unwrap();
    let out = s2rm(&["check", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("decoder.stages"));
}

#[test]
fn config_file_overrides_toy_defaults_and_seed_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        r#"{"width": 320, "seed": 3, "fusion": {"shift": false}}"#,
    )
    .unwrap();
    let r = report(&s2rm(&[
        "check",
        "--filter",
        "configured",
        "--config",
        path.to_str().unwrap(),
        "--seed",
        "9",
    ]));
    assert_eq!(r["config"]["width"], 320);
    assert_eq!(r["config"]["height"], 256);
    assert_eq!(r["config"]["fusion"]["shift"], false);
    assert_eq!(r["config"]["fusion"]["l2v"], true);
    assert_eq!(r["seed"], 9);
    assert_eq!(names(&r), ["shape.configured_model"]);
    assert_eq!(r["checks"][0]["status"], "pass");
}

#[test]
fn identical_invocations_give_identical_reports_except_timings() {
    let a = report(&s2rm(&["check", "--filter", "ablation", "--seed", "4"]));
    let b = report(&s2rm(&["check", "--filter", "ablation", "--seed", "4"]));
    assert_eq!(without_timings(a), without_timings(b));
}

#[test]
fn out_flag_writes_the_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = s2rm(&[
        "check",
        "--filter",
        "gates",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(names(&r), ["gates.range"]);
}

#[test]
fn gradcheck_fault_fixture_fails_naming_the_op() {
    let out = s2rm(&["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(out.status.code(), Some(1));
    let r = report(&out);
    let failed: Vec<&str> = r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["status"] == "fail")
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"gradcheck.softmax"));
    assert!(failed
        .iter()
        .all(|n| *n == "gradcheck.softmax" || n.starts_with("gradcheck.dice_end_to_end")));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL  gradcheck.softmax"));
}

#[test]
fn gradcheck_other_eps_is_informational() {
    let out = s2rm(&["gradcheck", "--eps", "1e-3"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r["results"]["eps"], 1e-3);
    for c in r["checks"].as_array().unwrap() {
        assert_eq!(c["status"], "skip");
        let m = c["metric"].as_f64().unwrap();
        assert!(m.is_finite() && m < 1.0, "{c}");
    }
}

#[test]
fn bench_enforces_minimum_repeat() {
    let out = s2rm(&["bench", "--repeat", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("repeat"));
}

#[test]
fn infer_with_zero_params_writes_uniform_mid_gray() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = s2rm(&["infer", "--zero-params", "--artifacts", d]);
    assert_eq!(out.status.code(), Some(0));
    let pgm = std::fs::read(dir.path().join("mask_0.pgm")).unwrap();
    let header = b"P5\n256 256\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 256 * 256);
    assert!(pgm[header.len()..].iter().all(|&b| b == 128));

    let sidecar: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mask_0.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["shape"], serde_json::json!([256, 256, 1]));
    let raw = std::fs::read(dir.path().join("mask_0.f64")).unwrap();
    assert_eq!(raw.len(), 256 * 256 * 8);
    assert!(raw
        .chunks(8)
        .all(|c| f64::from_le_bytes(c.try_into().unwrap()) == 0.5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("IoU"));
}

#[test]
fn infer_rejects_missing_or_mismatched_params() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.s2rm");
    let out = s2rm(&["infer", "--params", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Params for one geometry loaded under another.
    let blob = {
        let cfg = s2rm_core::pipeline::ModelConfig::toy();
        s2rm_core::pipeline::ModelParams::zeros(&cfg)
            .unwrap()
            .to_blob()
    };
    let params = dir.path().join("p.s2rm");
    blob.save(&params).unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"channels": [8, 8, 16, 32]}"#).unwrap();
    let out = s2rm(&[
        "infer",
        "--params",
        params.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--artifacts",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn train_toy_writes_params_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"steps": 3, "lr": 0.0}"#).unwrap();
    let d = dir.path().to_str().unwrap();
    let out = s2rm(&[
        "train-toy",
        "--config",
        cfg.to_str().unwrap(),
        "--artifacts",
        d,
    ]);
    // Three steps at lr 0 cannot overfit, so the gates fail.
    assert_eq!(out.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(
        r["artifacts"],
        serde_json::json!(["params.s2rm", "loss.csv"])
    );
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "step,loss,lr");
    assert_eq!(rows.len(), 4);
    let losses: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap())
        .collect();
    assert!(
        losses.windows(2).all(|w| w[0] == w[1]),
        "lr 0 keeps the loss constant"
    );
    assert!(dir.path().join("params.s2rm").exists());
}
