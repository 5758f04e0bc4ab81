use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn moad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_CONFIG: &str = r#"{
  "seed": 1,
  "dims": {"omic_dim": 8, "snn_hidden": 8, "fuse_hidden": 8, "attn_hidden": 8},
  "epochs": 2
}"#;

#[test]
fn generate_train_eval_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let config = tmp.path().join("config.json");
    fs::write(&config, SMALL_CONFIG).unwrap();

    let out = moad(&["gen-data", "--out", s(&data), "--classes", "4", "--slides", "12", "--seed", "3", "--min-patches", "6", "--max-patches", "12"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "omics.csv", "labels.csv", "signal_patches.csv", "features/slide_0000.feat"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let out = moad(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["per_fold"].as_array().unwrap().len(), 2);
    for f in ["config.json", "model.json", "params.bin", "report.json", "fold_0/params.bin", "fold_1/params.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let out = moad(&["eval", "--run", s(&run), "--data", s(&data)]);
    assert!(out.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(metrics["f1_macro"].as_f64().is_some());

    let csv = tmp.path().join("slide.csv");
    let out = moad(&["heatmap", "--run", s(&run), "--slide", "slide_0002", "--out", s(&csv), "--pgm"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<(usize, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    let sum: f64 = rows.iter().map(|r| r.1).sum();
    assert!((sum - 1.0).abs() < 1e-6);

    let pgm = fs::read(csv.with_extension("pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    let header_end = pgm.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(2).unwrap().0 + 1;
    assert_eq!(*pgm[header_end..].iter().max().unwrap(), 255);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"folds": 1}"#).unwrap();
    let missing = tmp.path().join("nowhere");

    let out = moad(&["train", "--config", s(&bad), "--data", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let good = tmp.path().join("good.json");
    fs::write(&good, SMALL_CONFIG).unwrap();
    let out = moad(&["train", "--config", s(&good), "--data", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));

    let out = moad(&["gen-data", "--out", s(&missing), "--classes", "5"]);
    assert_eq!(out.status.code(), Some(2));

    let out = moad(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0));
}
