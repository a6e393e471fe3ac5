use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aia_core::checkpoint::load_checkpoint;
use aia_core::model::{Model, ModelConfig};
use serde_json::{json, Value};

fn base_config(out: &Path) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["output_dir"] = json!(out);
    v
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn aia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aia")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) {
    let out = aia(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_is_byte_identical_and_echoes_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ca = write_config(dir.path(), "a.json", &base_config(&a));
    let cb = write_config(dir.path(), "b.json", &base_config(&b));
    run_ok(&["generate", "--config", ca.to_str().unwrap(), "--seed", "11"]);
    run_ok(&["generate", "--config", cb.to_str().unwrap(), "--seed", "11"]);
    assert_eq!(fs::read(a.join("dataset.bin")).unwrap(), fs::read(b.join("dataset.bin")).unwrap());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["world"]["seed"], 11);

    run_ok(&["generate", "--config", cb.to_str().unwrap(), "--seed", "12"]);
    assert_ne!(fs::read(a.join("dataset.bin")).unwrap(), fs::read(b.join("dataset.bin")).unwrap());
}

#[test]
fn output_dir_flag_redirects_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &base_config(&dir.path().join("configured")));
    let other = dir.path().join("other");
    run_ok(&["generate", "--config", cfg.to_str().unwrap(), "--output-dir", other.to_str().unwrap()]);
    assert!(other.join("dataset.bin").exists());
    assert!(!dir.path().join("configured").exists());
}

#[test]
fn missing_field_is_a_named_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config(dir.path());
    v["world"].as_object_mut().unwrap().remove("videos");
    let cfg = write_config(dir.path(), "c.json", &v);
    let out = aia(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("videos"), "{}", stderr(&out));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config(dir.path());
    v["trainer"]["warmup"] = json!(3);
    let cfg = write_config(dir.path(), "c.json", &v);
    let out = aia(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("warmup"));
}

#[test]
fn bad_usage_exits_with_one() {
    assert_eq!(aia(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(aia(&["train"]).status.code(), Some(1));
    assert_eq!(aia(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_videos_give_an_empty_valid_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config(dir.path());
    v["world"]["videos"] = json!(0);
    v["world"]["eval_videos"] = json!(0);
    let cfg = write_config(dir.path(), "c.json", &v);
    run_ok(&["generate", "--config", cfg.to_str().unwrap()]);
    let ds = aia_core::world::Dataset::<f64>::load(dir.path().join("dataset.bin")).unwrap();
    assert!(ds.videos.is_empty());
}

#[test]
fn zero_iterations_save_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config(dir.path());
    v["trainer"]["iters"] = json!(0);
    let cfg = write_config(dir.path(), "c.json", &v);
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
    let ckpt = load_checkpoint::<f64>(dir.path().join("model.ckpt")).unwrap();
    let model_config: ModelConfig = serde_json::from_value(v["model"].clone()).unwrap();
    assert_eq!(ckpt.model, Model::new(model_config, 3).unwrap());
    assert_eq!(ckpt.state.iteration, 0);
    let pool = aia_core::memory::MemoryPool::<f64>::load(dir.path().join("pool.bin")).unwrap();
    assert_eq!(pool.written(), 0);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    let mut v = base_config(&full);
    v["trainer"]["iters"] = json!(24);
    let cfg_full = write_config(dir.path(), "full.json", &v);
    run_ok(&["train", "--config", cfg_full.to_str().unwrap()]);

    v["output_dir"] = json!(split);
    v["trainer"]["iters"] = json!(10);
    let cfg_first = write_config(dir.path(), "first.json", &v);
    run_ok(&["train", "--config", cfg_first.to_str().unwrap()]);
    v["trainer"]["iters"] = json!(24);
    let cfg_rest = write_config(dir.path(), "rest.json", &v);
    run_ok(&["train", "--config", cfg_rest.to_str().unwrap(), "--resume"]);

    for file in ["model.ckpt", "pool.bin", "metrics.csv"] {
        assert_eq!(fs::read(full.join(file)).unwrap(), fs::read(split.join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn joint_training_beyond_the_guard_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config(dir.path());
    v["trainer"]["mode"] = json!("joint");
    v["trainer"]["window"] = json!(5);
    let cfg = write_config(dir.path(), "c.json", &v);
    let out = aia(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("resource guard"), "{}", stderr(&out));
}

#[test]
fn eval_is_repeatable_and_names_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &base_config(dir.path()));
    let c = cfg.to_str().unwrap();

    let out = aia(&["eval", "--config", c]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.ckpt"), "{}", stderr(&out));

    run_ok(&["train", "--config", c]);
    run_ok(&["eval", "--config", c]);
    let first = fs::read(dir.path().join("eval.json")).unwrap();
    run_ok(&["eval", "--config", c]);
    assert_eq!(first, fs::read(dir.path().join("eval.json")).unwrap());

    // the saved dataset file gives the same report as regeneration
    run_ok(&["generate", "--config", c]);
    let data = dir.path().join("dataset.bin");
    run_ok(&["eval", "--config", c, "--dataset", data.to_str().unwrap()]);
    assert_eq!(first, fs::read(dir.path().join("eval.json")).unwrap());
}

#[test]
fn bench_counts_follow_the_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &base_config(dir.path()));
    run_ok(&["bench", "--config", cfg.to_str().unwrap()]);
    let mut rows = csv::Reader::from_path(dir.path().join("bench.csv")).unwrap();
    let rows: Vec<Vec<String>> = rows.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    let col = |r: &Vec<String>, i: usize| r[i].parse::<u64>().unwrap();
    let amu: Vec<_> = rows.iter().filter(|r| r[0] == "amu").collect();
    let joint: Vec<_> = rows.iter().filter(|r| r[0] == "joint").collect();
    assert_eq!(amu.len(), 4);
    assert!(amu.iter().all(|r| col(r, 3) == col(amu[0], 3) && col(r, 2) == 1));
    let (j1, j4) = (joint.iter().find(|r| r[1] == "1").unwrap(), joint.iter().find(|r| r[1] == "4").unwrap());
    assert_eq!((col(j1, 2), col(j4, 2)), (3, 9));
    assert_eq!(3 * col(j4, 3), 9 * col(j1, 3));
}

#[test]
fn attention_files_are_normalised_over_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let v = base_config(dir.path());
    let cfg = write_config(dir.path(), "c.json", &v);
    let c = cfg.to_str().unwrap();
    run_ok(&["train", "--config", c]);
    run_ok(&["attn", "--config", c, "--video", "1", "--clip", "3"]);

    let mut names: Vec<String> = fs::read_dir(dir.path().join("attention"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["attn_block00_P.csv", "attn_block01_O.csv", "attn_block02_M.csv", "attn_block03_P.csv", "attn_block04_O.csv", "attn_block05_M.csv"]
    );
    let persons = v["world"]["persons_per_clip"].as_u64().unwrap() as usize;
    let window = v["trainer"]["window"].as_u64().unwrap() as usize;
    for name in &names {
        let mut rdr = csv::Reader::from_path(dir.path().join("attention").join(name)).unwrap();
        let header = rdr.headers().unwrap().clone();
        let keys = header.len() - 1;
        match &name[13..14] {
            "P" => assert_eq!(keys, persons),
            "M" => assert_eq!(keys, (2 * window + 1) * persons, "padded memory rows must be dropped"),
            _ => {}
        }
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec.unwrap();
            let sum: f64 = rec.iter().skip(1).map(|x| x.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9, "{name} row sums to {sum}");
            rows += 1;
        }
        assert_eq!(rows, persons);
    }
}

#[test]
fn converged_model_recovers_pose_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config(dir.path());
    v["trainer"]["iters"] = json!(1000);
    v["trainer"]["batch"] = json!(8);
    let cfg = write_config(dir.path(), "c.json", &v);
    let c = cfg.to_str().unwrap();
    run_ok(&["train", "--config", c]);
    run_ok(&["eval", "--config", c]);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    let pose = report["per_class_ap"][0].as_f64().unwrap();
    assert!(pose >= 0.99, "pose AP {pose}");
}
