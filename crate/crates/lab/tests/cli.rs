use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [11, 13]

[task]
n_train = 600
n_val = 200

[model]
hidden = [16, 16]

[train]
epochs = 3

[stream]
n_batches = 6
batch_size = 8

[studies]
lrs = [0.0001, 0.0002]
dropout_rates = [0.0, 0.3]
"#;

fn tta_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tta-lab"))
        .args(args)
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn missing_config_exits_with_code_2() {
    let out = tta_lab(&["run", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/config.toml"));
}

#[test]
fn unknown_key_is_reported_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[adapt]\nlearning_rate = 0.1\n").unwrap();
    let out = tta_lab(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn invalid_value_is_reported_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[stream]\nbatch_size = 0\n").unwrap();
    let out = tta_lab(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_strategy_is_a_usage_error() {
    let out = tta_lab(&["run", "--strategy", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = tta_lab(&[
        "run",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
        "--no-timing",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in [
        "report.json",
        "runs.csv",
        "batch_series.csv",
        "aggregate.csv",
        "transitions.csv",
        "config.toml",
        "source.ttam",
        "source.ttam.manifest",
    ] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    // five strategies by two seeds
    assert_eq!(csv_rows(&out_dir.join("runs.csv")).len(), 10);
    assert_eq!(csv_rows(&out_dir.join("batch_series.csv")).len(), 10 * 6);
    // long format: six metrics per variant once throughput is left out
    assert_eq!(csv_rows(&out_dir.join("aggregate.csv")).len(), 5 * 6);
    let transitions = fs::read_to_string(out_dir.join("transitions.csv")).unwrap();
    assert!(transitions.starts_with("Method,R→W,W→R,Net Value\r\n"));

    // the written config reproduces the run
    let again = dir.path().join("again");
    let out = tta_lab(&[
        "run",
        "--config",
        out_dir.join("config.toml").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "--no-timing",
    ]);
    assert!(out.status.success());
    let a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(again.join("report.json")).unwrap()).unwrap();
    assert_eq!(a["runs"], b["runs"]);
    assert_eq!(a["config_hash"], b["config_hash"]);
}

#[test]
fn overrides_narrow_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = tta_lab(&[
        "run",
        "--config",
        &config,
        "--strategy",
        "TENT",
        "--seed",
        "5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = csv_rows(&out_dir.join("runs.csv"));
    assert_eq!(rows.len(), 1);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"][0]["strategy"], "tent");
    assert_eq!(report["runs"][0]["seed"], 5);
    assert!(report["runs"][0]["throughput_sps"].is_number());
}

#[test]
fn saved_model_can_be_reloaded() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let first = dir.path().join("first");
    assert!(tta_lab(&[
        "run",
        "--config",
        &config,
        "--out",
        first.to_str().unwrap(),
        "--no-timing"
    ])
    .status
    .success());
    let text = SMALL.replace(
        "[model]\nhidden = [16, 16]",
        &format!(
            "[model]\nhidden = [16, 16]\npath = {:?}",
            first.join("source.ttam").to_str().unwrap()
        ),
    );
    let loaded_cfg = dir.path().join("loaded.toml");
    fs::write(&loaded_cfg, text).unwrap();
    let second = dir.path().join("second");
    let out = tta_lab(&[
        "run",
        "--config",
        loaded_cfg.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
        "--no-timing",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let acc = |d: &Path| -> Vec<String> {
        csv_rows(&d.join("runs.csv"))
            .into_iter()
            .map(|r| r.join("|"))
            .collect()
    };
    let strip_hash = |rows: Vec<String>| -> Vec<String> {
        rows.into_iter()
            .map(|r| {
                r.split('|')
                    .filter(|f| f.len() != 64)
                    .collect::<Vec<_>>()
                    .join("|")
            })
            .collect()
    };
    assert_eq!(strip_hash(acc(&first)), strip_hash(acc(&second)));
    assert!(!second.join("source.ttam").exists());
}

#[test]
fn mismatched_saved_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let first = dir.path().join("first");
    assert!(tta_lab(&[
        "run",
        "--config",
        &config,
        "--strategy",
        "direct",
        "--out",
        first.to_str().unwrap()
    ])
    .status
    .success());
    let text = SMALL.replace(
        "[model]\nhidden = [16, 16]",
        &format!(
            "[model]\nhidden = [32]\npath = {:?}",
            first.join("source.ttam").to_str().unwrap()
        ),
    );
    let cfg = dir.path().join("wrong.toml");
    fs::write(&cfg, text).unwrap();
    let out = tta_lab(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn study_tables_have_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let cases: [(&str, &str, usize); 5] = [
        // four adapting strategies, two rates, two seeds
        ("sweep-lr", "sweep_lr.csv", 4 * 2 * 2),
        // two modes, two rates, two seeds
        ("study-dropout-mode", "dropout_mode.csv", 2 * 2 * 2),
        ("study-dropout-rate", "dropout_rate.csv", 2 * 2),
        // one row per variant
        ("study-perturbation", "perturbation.csv", 3),
        // five strategies, two modes, two seeds, three segments
        ("run-online", "online.csv", 5 * 2 * 2 * 3),
    ];
    for (command, file, rows) in cases {
        let out_dir = dir.path().join(command);
        let out = tta_lab(&[
            command,
            "--config",
            &config,
            "--out",
            out_dir.to_str().unwrap(),
            "--jobs",
            "2",
        ]);
        assert!(
            out.status.success(),
            "{command}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(csv_rows(&out_dir.join(file)).len(), rows, "{command}");
        assert!(out_dir.join("report.json").exists());
    }
}

#[test]
fn export_data_writes_checksummed_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("data");
    let out = tta_lab(&[
        "export-data",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(csv_rows(&out_dir.join("source_train.csv")).len(), 600);
    assert_eq!(csv_rows(&out_dir.join("source_val.csv")).len(), 200);
    let stream = csv_rows(&out_dir.join("stream_seed_11.csv"));
    assert_eq!(stream.len(), 6 * 8);
    assert_eq!(stream[0].len(), 4 + 5);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 4);
    for f in files {
        let text = fs::read(out_dir.join(f["name"].as_str().unwrap())).unwrap();
        use sha2::Digest;
        let digest: String = sha2::Sha256::digest(&text)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(f["sha256"], digest.as_str());
    }
}
