use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "seed": 3,
  "dataset": { "n": 40, "dim": 6, "separation": 4.0 },
  "train": { "learning_rate": 0.001, "epochs": 4, "hidden": [8], "batch_size": 8 },
  "features": { "images": 2, "filter_sizes": [1, 5] }
}"#;

fn ntk_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntk-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_in(sub: &str, config: &str, out: &Path) -> Output {
    ntk_lab(&[sub, "--config", config, "--out", out.to_str().unwrap()])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for sub in ["gram", "attack", "filter"] {
        let (a, b) = (dir.path().join(format!("{sub}-a")), dir.path().join(format!("{sub}-b")));
        for out in [&a, &b] {
            let o = run_in(sub, &cfg, out);
            assert!(o.status.success(), "{sub}: {}", stderr(&o));
        }
        let mut compared = 0;
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            if name.to_str().unwrap().ends_with(".csv") {
                assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
                compared += 1;
            }
        }
        assert!(compared > 0, "{sub} wrote no csv");
    }
}

#[test]
fn seed_flag_changes_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_in("gram", &cfg, &a).status.success());
    let o = ntk_lab(&["gram", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(fs::read(a.join("spectrum.csv")).unwrap(), fs::read(b.join("spectrum.csv")).unwrap());
}

#[test]
fn manifest_lists_the_written_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("gram");
    let o = run_in("gram", &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "gram");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    for name in ["gram.bin", "spectrum.csv", "predictions.csv", "summary.json"] {
        assert!(files.contains(&name), "{name} missing from {files:?}");
    }
    for name in &files {
        assert!(out.join(name).is_file(), "{name} not on disk");
    }
    let spectrum = fs::read_to_string(out.join("spectrum.csv")).unwrap();
    assert_eq!(spectrum.lines().next(), Some("index,eigenvalue"));
    assert_eq!(spectrum.lines().count(), 21);
}

#[test]
fn invalid_enum_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "kernel": { "family": "three-layer" } }"#);
    let o = run_in("gram", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kernel.family"), "{}", stderr(&o));
}

#[test]
fn unknown_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "attack": { "epsilom": 0.1 } }"#);
    let o = run_in("attack", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epsilom"), "{}", stderr(&o));
}

#[test]
fn out_of_range_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "dataset": { "train_fraction": 1.5 } }"#);
    let o = run_in("gram", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset.train_fraction"), "{}", stderr(&o));
}

#[test]
fn experiment_must_match_the_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{ "experiment": "dynamics" }"#);
    let out = dir.path().join("out");
    let o = run_in("gram", &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("experiment"), "{}", stderr(&o));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn missing_idx_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "dataset": { "kind": "idx", "images": "nope-images", "labels": "nope-labels" } }"#,
    );
    let o = run_in("gram", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "dataset": { "n": 40, "dim": 6, "normalize": "none", "separation": 50.0 },
             "train": { "learning_rate": 1000.0, "epochs": 20, "hidden": [8] },
             "transfer": { "widths": [16], "log_epochs": [20] } }"#,
    );
    let o = run_in("transfer", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
