use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn relprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relprompt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = relprompt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

fn fails(args: &[&str]) -> String {
    let out = relprompt(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(!err.trim().is_empty(), "{args:?} failed silently");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Small dataset plus a fast config, written under `dir`.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        r#"{"node_count": 60, "feature_dim": 4, "fraud_rate": 0.2, "signal": [0.9, 0.3], "avg_degree": 4.0, "seed": 3}"#,
    )
    .unwrap();
    let data = dir.join("data");
    let printed = ok(&["gen-data", "--spec", s(&spec), "--out", s(&data)]);
    let manifest = PathBuf::from(printed.trim());
    assert!(manifest.exists(), "manifest {} missing", manifest.display());

    let config = dir.join("config.json");
    fs::write(
        &config,
        r#"{"epochs": 2, "batch_size": 4, "seeds": [0, 1], "mlp_hidden": 8,
            "decoder": {"layers": 1, "heads": 2, "d_emb": 16, "ffn": 32, "max_len": 128}}"#,
    )
    .unwrap();
    (manifest, config)
}

fn pairwise_auc(rows: &[(i64, f64)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for &(lp, sp) in rows.iter().filter(|r| r.0 == 1) {
        for &(_, sn) in rows.iter().filter(|r| r.0 == 0) {
            debug_assert_eq!(lp, 1);
            pairs += 1.0;
            wins += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = setup(dir.path());
    let ckpt = dir.path().join("ckpt");
    ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--config",
        s(&config),
        "--out",
        s(&ckpt),
    ]);
    assert!(ckpt.join("index.json").exists());
    assert!(ckpt.join("vocab.json").exists());

    let report_path = dir.path().join("report.json");
    let scores_path = dir.path().join("scores.csv");
    let printed = ok(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--json",
        s(&report_path),
        "--scores",
        s(&scores_path),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let echoed: Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(report, echoed);

    let csv = fs::read_to_string(&scores_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("node,label,score,prediction"));
    let rows: Vec<(i64, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let score: f64 = f[2].parse().unwrap();
            let pred: i64 = f[3].parse().unwrap();
            assert_eq!(
                pred,
                i64::from(score > 0.0),
                "prediction disagrees with score sign: {l}"
            );
            (f[1].parse().unwrap(), score)
        })
        .collect();
    assert_eq!(rows.len() as u64, report["n_eval"].as_u64().unwrap());
    let auc = report["auc"].as_f64().unwrap();
    assert!((pairwise_auc(&rows) - auc).abs() < 1e-12);

    // Same checkpoint, same numbers.
    let again = ok(&["eval", "--ckpt", s(&ckpt), "--manifest", s(&manifest)]);
    assert_eq!(printed, again);
    let val = ok(&["eval", "--ckpt", s(&ckpt), "--split", "val"]);
    assert_ne!(printed, val);
}

#[test]
fn ablate_and_single_view_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = setup(dir.path());
    let out = dir.path().join("runs");
    ok(&[
        "ablate",
        "--manifest",
        s(&manifest),
        "--config",
        s(&config),
        "--modes",
        "full,wo_llm",
        "--out",
        s(&out),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 4);
    assert!(report["summary"]["full"]["auc"]["mean"].is_number());
    assert!(report["summary"]["wo_llm"]["auc"]["mean"].is_number());

    ok(&[
        "single-view",
        "--manifest",
        s(&manifest),
        "--config",
        s(&config),
        "--view",
        "1",
        "--with-full",
        "--out",
        s(&out),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("single_view.json")).unwrap()).unwrap();
    let modes: Vec<&str> = report["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["mode"].as_str().unwrap())
        .collect();
    assert_eq!(modes, ["single_view:1", "full", "single_view:1", "full"]);
    assert!(report["single_view_average"]["auc"]["mean"].is_number());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = setup(dir.path());
    let missing = dir.path().join("missing.json");
    let out = dir.path().join("out");

    fails(&["train", "--manifest", s(&missing), "--out", s(&out)]);
    fails(&["train", "--manifest", s(&manifest), "--mode", "bogus", "--out", s(&out)]);
    fails(&[
        "train",
        "--manifest",
        s(&manifest),
        "--mode",
        "single_view:7",
        "--out",
        s(&out),
    ]);
    fails(&["eval", "--ckpt", s(&out)]);
    fails(&[
        "single-view",
        "--manifest",
        s(&manifest),
        "--config",
        s(&config),
        "--view",
        "5",
        "--out",
        s(&out),
    ]);
    fails(&["gen-data", "--spec", s(&config), "--out", s(&out)]);

    let bad_config = dir.path().join("bad.json");
    fs::write(&bad_config, r#"{"batch_size": 0}"#).unwrap();
    fails(&[
        "train",
        "--manifest",
        s(&manifest),
        "--config",
        s(&bad_config),
        "--out",
        s(&out),
    ]);
    fs::write(&bad_config, r#"{"epochs": "many"}"#).unwrap();
    fails(&[
        "train",
        "--manifest",
        s(&manifest),
        "--config",
        s(&bad_config),
        "--out",
        s(&out),
    ]);

    let bad_spec = dir.path().join("spec.json");
    fs::write(
        &bad_spec,
        r#"{"node_count": 10, "feature_dim": 2, "fraud_rate": 1.5, "signal": [0.5]}"#,
    )
    .unwrap();
    fails(&["gen-data", "--spec", s(&bad_spec), "--out", s(&out)]);
}
