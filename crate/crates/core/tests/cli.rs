use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "epochs": 1,
  "batch_size": 16,
  "bank_capacity": 64,
  "bank_k": 16,
  "dataset": {"synthetic": {"n_per_class": 20}}
}"#;

fn metaug(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaug"))
        .args(args)
        .current_dir(dir)
        .env("METAUG_WORKERS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_then_eval_writes_the_run_directory() {
    let dir = setup();
    let o = metaug(dir.path(), &["train", "--config", "small.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["config.json", "metrics.jsonl", "checkpoint_0000.ckpt", "checkpoint_0001.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["epochs"], 1);
    assert_eq!(saved["oucl"]["beta"], 64.0);

    let o = metaug(dir.path(), &["eval", "--run", "run", "--source", "z+aug"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "eval_z_aug.json",
        "eval_z_aug.csv",
        "histogram_z_aug_originals.csv",
        "histogram_z_aug_augmented.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let o = metaug(dir.path(), &["eval", "--run", "run", "--checkpoint", "run/checkpoint_0000.ckpt"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("eval_h.json").exists());
}

#[test]
fn configuration_errors_exit_with_two_and_name_the_key() {
    let dir = setup();
    for (args, key) in [
        (vec!["train", "--config", "small.json", "--set", "alhpa=1"], "alhpa"),
        (vec!["train", "--config", "small.json", "--set", "oucl.gamma=0.9"], "oucl.gamma"),
        (vec!["compare", "--config", "small.json", "--methods", "metaug,simclr"], "simclr"),
        (vec!["sweep", "--config", "small.json", "--param", "no_such=1,2"], "no_such"),
    ] {
        let o = metaug(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{args:?}: {}", stderr(&o));
    }
    std::fs::write(dir.path().join("typo.json"), r#"{"epochs": 1, "lerning_rate": 0.1}"#).unwrap();
    let o = metaug(dir.path(), &["train", "--config", "typo.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lerning_rate"));
    assert_eq!(metaug(dir.path(), &["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_three() {
    let dir = setup();
    for args in [
        vec!["train", "--config", "absent.json"],
        vec!["eval", "--run", "no-run"],
        vec!["sweep", "--config", "small.json", "--grid", "absent-grid.json"],
    ] {
        let o = metaug(dir.path(), &args);
        assert_eq!(o.status.code(), Some(3), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn divergence_exits_with_four() {
    let dir = setup();
    let o = metaug(dir.path(), &["train", "--config", "small.json", "--set", "lr=1e9", "--out", "boom"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverg"), "{}", stderr(&o));
}

#[test]
fn compare_feeds_every_method_the_same_batches() {
    let dir = setup();
    let o = metaug(
        dir.path(),
        &[
            "compare",
            "--config",
            "small.json",
            "--methods",
            "metaug,infonce",
            "--seeds",
            "0,1",
            "--out",
            "cmp",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 4);
    for seed in ["0", "1"] {
        let digests: Vec<&str> = rows
            .iter()
            .filter(|r| r[col("seed")] == seed)
            .map(|r| r[col("batch_digest")].as_str())
            .collect();
        assert_eq!(digests.len(), 2);
        assert_eq!(digests[0], digests[1], "seed {seed}");
    }
    let d0 = rows.iter().find(|r| r[col("seed")] == "0").unwrap()[col("batch_digest")].clone();
    let d1 = rows.iter().find(|r| r[col("seed")] == "1").unwrap()[col("batch_digest")].clone();
    assert_ne!(d0, d1);
    assert!(dir.path().join("cmp/compare_summary.csv").exists());
    assert!(dir.path().join("cmp/metaug-seed0/checkpoint_0001.ckpt").exists());
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = setup();
    std::fs::write(dir.path().join("grid.json"), r#"{"oucl.beta": [8, 64]}"#).unwrap();
    let o = metaug(
        dir.path(),
        &[
            "sweep",
            "--config",
            "small.json",
            "--grid",
            "grid.json",
            "--param",
            "alpha=0,1",
            "--out",
            "sw",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("cell,oucl.beta,alpha,status,accuracy"));
    assert!(lines[1..].iter().all(|l| l.contains(",ok,")));
}

#[test]
fn identical_invocations_write_identical_logs() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = metaug(dir.path(), &["train", "--config", "small.json", "--set", "seed=5", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["metrics.jsonl", "checkpoint_0001.ckpt"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}
