use std::path::Path;
use std::process::{Command, Output};

use armorbench_cli::{config, parse_config, RunConfig};

fn armorbench(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_armorbench"));
    cmd.args(args).env_remove("ARMORBENCH_CONFIG").env("RUST_LOG", "warn");
    if let Some(p) = config {
        cmd.arg("--config").arg(p);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A run small enough to finish in a few seconds.
fn tiny_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::minimal(3, dir.join("out"));
    cfg.data.n = 60;
    cfg.data.num_classes = 3;
    cfg.data.height = 6;
    cfg.data.width = 6;
    cfg.model.hidden_dim = 16;
    cfg.model.embed_dim = 8;
    cfg.train.epochs = 2;
    cfg.advtrain.train.epochs = 2;
    cfg.attack.apgd_iters = 4;
    cfg.attack.apgd_restarts = 1;
    cfg.attack.deepfool_max_iter = 10;
    cfg.detectors.train_samples = 12;
    cfg.detectors.params.adaboost.rounds = 5;
    cfg.detectors.params.gbdt_level.trees = 5;
    cfg.detectors.params.gbdt_leaf.trees = 5;
    cfg.detectors.params.mlp.epochs = 5;
    cfg.sweep.rounds = 2;
    cfg.sweep.mlp_epochs = 2;
    cfg.sweep.grid.learning_rates = vec![0.1, 1.0];
    cfg.sweep.grid.depth_or_leaves = vec![1, 2];
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, config::dump(cfg)).unwrap();
    p
}

#[test]
fn pipeline_writes_documented_files_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let path = write_config(dir.path(), &cfg);
    let o = armorbench(&["pipeline"], Some(&path));
    assert!(o.status.success(), "{}", stderr(&o));
    let out = &cfg.output_dir;
    for f in [
        "data/train.aadv",
        "data/val.aadv",
        "data/annotations.csv",
        "models/baseline.ckpt",
        "models/finetuned.ckpt",
        "attacks/val_fused.aadv",
        "attacks/success.json",
        "advtrain/train.aadv",
        "eval/finetuned_adv.confusion.svg",
        "eval/accuracy.svg",
        "detectors/mlp.adet",
        "detectors/detection_metrics.json",
        "report.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["attack_success"].as_object().unwrap().len(), 5);
    assert_eq!(report["detectors"].as_array().unwrap().len(), 4);

    let first = std::fs::read(out.join("report.json")).unwrap();
    let ckpt = std::fs::read(out.join("models/finetuned.ckpt")).unwrap();
    let o = armorbench(&["pipeline"], Some(&path));
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), first);
    assert_eq!(std::fs::read(out.join("models/finetuned.ckpt")).unwrap(), ckpt);

    let o = armorbench(&["sweep"], Some(&path));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 4);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let path = write_config(dir.path(), &cfg);
    let mut reports = Vec::new();
    for t in ["1", "3"] {
        let o = armorbench(&["pipeline", "--threads", t], Some(&path));
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(std::fs::read(cfg.output_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn eval_without_checkpoint_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny_config(dir.path()));
    let o = armorbench(&["eval"], Some(&path));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("baseline.ckpt"), "{}", stderr(&o));
    let o = armorbench(&["report"], Some(&path));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, "{}").unwrap();
    let o = armorbench(&["gen-data"], Some(&p));
    assert_eq!(o.status.code(), Some(2));
    for k in config::REQUIRED_KEYS {
        assert!(stderr(&o).contains(k));
    }
    std::fs::write(&p, r#"{"seed":1,"output_dir":"o","data":{},"attack":{"epsilonn":0.1}}"#).unwrap();
    let o = armorbench(&["gen-data"], Some(&p));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilonn"));
    let o = armorbench(&["gen-data"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dump_config_round_trips_and_applies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"seed":1,"output_dir":"o","data":{}}"#).unwrap();
    let o = armorbench(&["dump-config", "--seed", "9", "--epsilon", "0.05"], Some(&p));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = parse_config(&text).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.attack.epsilon, 0.05);
    let mut want = RunConfig::minimal(9, "o");
    want.attack.epsilon = 0.05;
    assert_eq!(cfg, want);
    for (key, _) in config::defaults_table() {
        let mut v: &serde_json::Value = &serde_json::from_str(&text).unwrap();
        for part in key.split('.') {
            v = &v[part];
        }
        assert!(!v.is_null() || key.ends_with("path") || key.ends_with("limit"), "{key}");
    }

    // The environment variable names the config when no flag is given.
    let o = Command::new(env!("CARGO_BIN_EXE_armorbench"))
        .arg("dump-config")
        .env("ARMORBENCH_CONFIG", &p)
        .output()
        .unwrap();
    assert!(o.status.success());
}
