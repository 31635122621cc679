use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;
use tve_core::data::{read_manifest, Split, Task};

const CONFIG: &str = r#"{
  "sizes": {"pretrain_train": 120, "pretrain_test": 40, "downstream_train": 60, "downstream_test": 20},
  "backbone_training": {"epochs": 2},
  "head_training": {"epochs": 5},
  "pretraining": {"steps": 30},
  "finetuning": {"steps": 10},
  "task": "quadrant",
  "n_images": 4,
  "correlation": {"n_images": 3}
}"#;

fn tve(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tve"))
        .current_dir(root)
        .env_remove("TVE_SEED")
        .args(["--config", "run.json", "--data", "data"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) {
    let out = tve(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Corpus, backbone, task head and explainer shared by the tests below.
fn workspace() -> &'static TempDir {
    static W: OnceLock<TempDir> = OnceLock::new();
    W.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::write(root.join("run.json"), CONFIG).unwrap();
        ok(root, &["gen-data", "--out", "data"]);
        ok(root, &["train-backbone", "--out", "backbone"]);
        ok(root, &["finetune-head", "--backbone", "backbone", "--out", "head"]);
        ok(root, &["pretrain-explainer", "--backbone", "backbone", "--out", "expl"]);
        dir
    })
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn corpus_has_declared_sizes_and_exact_class_balance() {
    let m = read_manifest(&workspace().path().join("data")).unwrap();
    for (task, split, n) in [
        (Task::Quadrant, Split::Train, 120),
        (Task::Quadrant, Split::Test, 40),
        (Task::Parity, Split::Train, 60),
        (Task::Shape, Split::Test, 20),
    ] {
        let labels: Vec<usize> = m.entries.iter().filter(|e| e.task == task && e.split == split).map(|e| e.label).collect();
        assert_eq!(labels.len(), n);
        for c in 0..task.num_classes() {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), n / task.num_classes());
        }
    }
}

#[test]
fn gen_data_refuses_a_non_empty_directory() {
    let root = workspace().path();
    let out = tve(root, &["gen-data", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
}

#[test]
fn invalid_configuration_exits_with_two() {
    let root = workspace().path();
    assert_eq!(tve(root, &["explain", "--set", "grid.nonsense=1", "--out", "x"]).status.code(), Some(2));
    assert_eq!(tve(root, &["explain", "--mode", "bogus", "--model", "head", "--out", "x"]).status.code(), Some(2));
    // TVE_FT without a fine-tuned explainer names the missing artifact.
    let out = tve(root, &["explain", "--mode", "TVE_FT", "--model", "head", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fine-tuned explainer"));
}

#[test]
fn zero_step_pretraining_copies_the_checkpoint() {
    let root = workspace().path();
    ok(root, &["pretrain-explainer", "--init", "--backbone", "backbone", "--explainer", "expl", "--set", "pretraining.steps=0", "--out", "copy"]);
    let manifest = json(&root.join("expl/manifest.json"));
    let mut files = vec!["manifest.json".to_string()];
    files.extend(manifest["params"].as_array().unwrap().iter().map(|p| p["file"].as_str().unwrap().to_string()));
    for f in files {
        assert_eq!(std::fs::read(root.join("expl").join(&f)).unwrap(), std::fs::read(root.join("copy").join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn exact_and_transferred_modes_write_identical_values() {
    let root = workspace().path();
    ok(root, &["explain", "--model", "head", "--mode", "exact", "--out", "hm_exact"]);
    ok(root, &["explain", "--model", "head", "--mode", "transferred", "--out", "hm_transferred"]);
    for i in 0..4 {
        let a = json(&root.join(format!("hm_exact/{i:05}.json")));
        let b = json(&root.join(format!("hm_transferred/{i:05}.json")));
        let (va, vb) = (a["values"].as_array().unwrap(), b["values"].as_array().unwrap());
        for (x, y) in va.iter().zip(vb) {
            assert!((x.as_f64().unwrap() - y.as_f64().unwrap()).abs() <= 1e-5);
        }
        assert_eq!(a["class"], b["class"]);
        let pgm = std::fs::read(root.join(format!("hm_exact/{i:05}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);
    }
    assert!(root.join("hm_exact/config.json").is_file());
}

#[test]
fn environment_seed_is_overridden_by_flags() {
    let root = workspace().path();
    let run = |env: Option<&str>, extra: &[&str], out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tve"));
        cmd.current_dir(root).args(["--config", "run.json", "--data", "data", "--model", "head", "--mode", "random", "--out", out]);
        if let Some(s) = env {
            cmd.env("TVE_SEED", s);
        }
        assert!(cmd.args(extra).args(["explain"]).status().unwrap().success());
        json(&root.join(out).join("config.json"))["seed"].as_u64().unwrap()
    };
    assert_eq!(run(None, &[], "seed_default"), 0);
    assert_eq!(run(Some("13"), &[], "seed_env"), 13);
    assert_eq!(run(Some("13"), &["--seed", "21"], "seed_flag"), 21);
}

#[test]
fn threshold_miss_exits_with_four_after_writing_results() {
    let root = workspace().path();
    let out = tve(root, &["correlate", "--model", "head", "--set", "correlation.min_pearson=1.5", "--out", "corr_strict"]);
    assert_eq!(out.status.code(), Some(4));
    let report = json(&root.join("corr_strict/correlation.json"));
    assert_eq!(report["passed"], Value::Bool(false));
    assert_eq!(report["points"].as_array().unwrap().len(), 3 * 8);
}

#[test]
fn divergence_exits_with_three() {
    let root = workspace().path();
    let out = tve(root, &["pretrain-explainer", "--backbone", "backbone", "--set", "pretraining.lr=1e30", "--set", "pretraining.warmup_ratio=0", "--out", "diverged"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn random_sweep_writes_a_band() {
    let root = workspace().path();
    ok(root, &["evaluate", "--model", "head", "--mode", "random", "--set", "sweep=4", "--out", "band"]);
    let band = json(&root.join("band/random_band.json"));
    assert_eq!(band[0]["means"].as_array().unwrap().len(), 4);
    let plus = json(&root.join("band/results_random_plus.json"));
    assert_eq!(plus["per_image"].as_array().unwrap().len(), 4);
}
