use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn taxposed(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taxposed"))
        .args(args)
        .current_dir(dir)
        .env_remove("TAXPOSED_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn datagen_train_eval_heatmap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = taxposed(&["datagen", "--sites", "1", "--n", "4", "--seed", "3", "--out", "train"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = taxposed(&["datagen", "--sites", "2", "--n", "2", "--seed", "4", "--out", "eval"], d);
    assert!(o.status.success(), "{}", stderr(&o));

    fs::write(d.join("small.json"), r#"{"model": {"hidden": 16, "knn": 8}, "batch_size": 2}"#).unwrap();
    let o = taxposed(
        &["train", "--data", "train", "--config", "small.json", "--steps", "3", "--seed", "1", "--out", "run"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("run/model.ckpt").is_file());
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let o = taxposed(
        &["eval", "--checkpoint", "run/model.ckpt", "--data", "eval", "--samples-per-scene", "3", "--out", "report.json"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scenes"], 2);
    assert_eq!(report["mode_frequencies"].as_array().unwrap().len(), 2);

    let o = taxposed(&["heatmap", "--checkpoint", "run/model.ckpt", "--data", "eval", "--out", "heat.txt"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let heat = fs::read_to_string(d.join("heat.txt")).unwrap();
    let rows: Vec<Vec<f64>> = heat
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(rows.iter().all(|r| r.len() == 4 && (0.0..=1.0).contains(&r[3])));
    // 64 action points and two sites of 64 points each.
    assert_eq!(rows.len(), 64 + 2 * 64);
}

#[test]
fn datagen_is_reproducible_from_environment_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = Command::new(env!("CARGO_BIN_EXE_taxposed"))
            .args(["datagen", "--sites", "2", "--n", "3", "--out", out])
            .current_dir(d)
            .env("TAXPOSED_SEED", "42")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

fn tree(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = taxposed(&["eval", "--checkpoint", "nope.ckpt", "--data", "x", "--out", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_prints_schema_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(taxposed(&["datagen", "--sites", "1", "--n", "1", "--out", "data"], d).status.success());
    fs::write(d.join("bad.json"), r#"{"learning_rate": -1.0}"#).unwrap();
    let o = taxposed(&["train", "--data", "data", "--config", "bad.json", "--out", "run"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("grad_clip"));

    let o = taxposed(&["train", "--data", "data", "--ablation", "bogus", "--out", "run"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(taxposed(&["datagen"], dir.path()).status.code(), Some(2));
    assert_eq!(taxposed(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn unreadable_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = taxposed(&["train", "--data", "missing", "--out", "run", "--steps", "1"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
