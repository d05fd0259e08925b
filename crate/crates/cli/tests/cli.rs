//! End-to-end runs of the `prnn` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn prnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prnn")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, value: Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn quick_config(dir: &Path, manifest: &Path) -> PathBuf {
    write_config(
        dir,
        json!({
            "hyper": {"lambda": 0.1, "pretrain_epochs": 2, "learn_epochs": 2, "em_max_iters": 2},
            "manifest": manifest,
        }),
    )
}

fn gen_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(prnn(&["gen-data", "--out", data.to_str().unwrap()]));
    data.join("manifest.json")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_defaults_to_forty_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = read_json(&gen_data(dir.path()));
    let counts: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|s| manifest["splits"][s].as_array().unwrap().len())
        .collect();
    assert_eq!(counts, vec![24, 8, 8]);
    assert_eq!(manifest["num_classes"], 4);
}

#[test]
fn gen_data_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"dataset": {"num_classes": 1}}));
    let out = prnn(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_requires_an_existing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = prnn(&["train", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let cfg = quick_config(dir.path(), &dir.path().join("missing.json"));
    let out = prnn(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let out = prnn(&["train", "--variant", "bogus", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_stage_checkpoints_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_data(dir.path());
    let cfg = quick_config(dir.path(), &manifest);
    let cfg = cfg.to_str().unwrap();
    let run = |variant: &str, name: &str| {
        let out = dir.path().join(name);
        ok(prnn(&["train", "--config", cfg, "--variant", variant, "--seed", "3", "--out", out.to_str().unwrap()]));
        out
    };

    let full = run("prnn_full", "full");
    let stages: Vec<String> = fs::read_dir(full.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(stages.len(), 3);
    for s in ["pretrain", "learn", "refine"] {
        assert!(full.join("checkpoints").join(s).join("model.json").exists());
    }
    assert!(full.join("checkpoints/refine/bridging_matrix.ptns").exists());

    let metrics = read_json(&full.join("metrics.json"));
    let keys: Vec<&str> = metrics.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["variant", "seed", "mean_accuracy", "per_class_accuracy", "confusion", "stage_losses"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(metrics["seed"], 3);
    assert_eq!(metrics["per_class_accuracy"].as_array().unwrap().len(), 4);
    let losses = &metrics["stage_losses"];
    for k in ["pretrain", "learn", "refine_Q"] {
        assert!(losses[k].as_array().is_some_and(|v| !v.is_empty()), "{k}");
    }
    for f in ["config.json", "curves.csv", "confusion.csv", "predictions.csv", "traces.dat"] {
        assert!(full.join(f).exists(), "{f}");
    }

    let vanilla = run("vanilla_cnn_rnn", "vanilla");
    assert_eq!(fs::read_dir(vanilla.join("checkpoints")).unwrap().count(), 1);

    let again = run("prnn_full", "full_again");
    assert_eq!(tree(&full), tree(&again));
}

#[test]
fn eval_rejects_checkpoint_with_other_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_data(dir.path());
    let cfg = quick_config(dir.path(), &manifest);
    let run = dir.path().join("run");
    ok(prnn(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--variant",
        "vanilla_cnn_rnn",
        "--out",
        run.to_str().unwrap(),
    ]));
    let ck = run.join("checkpoints/vanilla");
    let eval_dir = dir.path().join("eval");
    let out = ok(prnn(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("test (8 sequences)"));
    assert_eq!(read_json(&eval_dir.join("metrics.json"))["sequences"], 8);

    let small = dir.path().join("k2");
    let k2 = write_config(dir.path(), json!({"dataset": {"num_classes": 2}}));
    ok(prnn(&["gen-data", "--config", k2.to_str().unwrap(), "--out", small.to_str().unwrap()]));
    let out = prnn(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--manifest",
        small.join("manifest.json").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
