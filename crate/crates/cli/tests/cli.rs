use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tcnl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcnl")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "dataset": {"image_size": 32, "n_train": 8, "n_test": 4},
  "network": {"shallow_channels": [4, 8], "extractor_channels": [4, 8], "mapper_channels": [4], "classifier_hidden": 8},
  "train": {"epochs": 1, "batch_size": 4}
}"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        fs::write(f.path("config.json"), TINY).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn gen(&self, name: &str, seed: &str) -> Output {
        tcnl(&["gen-data", "--config", &self.s("config.json"), "--out", &self.s(name), "--seed", seed])
    }

    fn trained(&self) -> PathBuf {
        assert_eq!(code(&self.gen("data", "1")), 0);
        let o = tcnl(&["train", "--config", &self.s("config.json"), "--data", &self.s("data"), "--out", &self.s("run")]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        self.path("run")
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_reproducible() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("a", "3")), 0);
    assert_eq!(code(&f.gen("b", "3")), 0);
    let (a, b) = (files(&f.path("a")), files(&f.path("b")));
    assert_eq!(a.len(), 1 + 12 * (1 + 4 * 2 + 1));
    assert!(a == b);
    assert_eq!(code(&f.gen("c", "4")), 0);
    assert!(files(&f.path("c")) != a);
}

#[test]
fn default_config_describes_four_classes_and_concepts() {
    let f = Fixture::new();
    fs::write(f.path("small.json"), r#"{"dataset": {"n_train": 4, "n_test": 4}}"#).unwrap();
    let o = tcnl(&["gen-data", "--config", &f.s("small.json"), "--out", &f.s("d")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(f.path("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["classes"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["config"]["concepts"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["config"]["image_size"], 64);
}

#[test]
fn bad_config_key_exits_2_naming_the_key() {
    let f = Fixture::new();
    fs::write(f.path("bad.json"), r#"{"dataset": {"image_sise": 32}}"#).unwrap();
    let o = tcnl(&["gen-data", "--config", &f.s("bad.json"), "--out", &f.s("d")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("image_sise"), "{}", stderr(&o));
    fs::write(f.path("bad.json"), r#"{"train": {"epochs": -1}}"#).unwrap();
    let o = tcnl(&["train", "--config", &f.s("bad.json"), "--data", &f.s("d"), "--out", &f.s("r")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));
}

#[test]
fn existing_output_requires_force() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("d", "1")), 0);
    let o = f.gen("d", "2");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    let o = tcnl(&["gen-data", "--config", &f.s("config.json"), "--out", &f.s("d"), "--seed", "2", "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::create_dir_all(f.path("other")).unwrap();
    fs::write(f.path("other/keep.txt"), "mine").unwrap();
    let o = tcnl(&["gen-data", "--out", &f.s("other"), "--force"]);
    assert_eq!(code(&o), 2);
    assert_eq!(fs::read_to_string(f.path("other/keep.txt")).unwrap(), "mine");
}

#[test]
fn held_lock_refuses_a_second_writer() {
    let f = Fixture::new();
    fs::create_dir_all(f.path("d")).unwrap();
    fs::write(f.path("d/.tcnl.lock"), "1").unwrap();
    let o = f.gen("d", "1");
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let f = Fixture::new();
    let o = tcnl(&["train", "--data", &f.s("nowhere"), "--out", &f.s("r")]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn train_writes_three_artifacts_and_records_the_flag() {
    let f = Fixture::new();
    let run = f.trained();
    for name in ["best.ckpt", "final.ckpt", "history.jsonl"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    assert!(!run.join(".tcnl.lock").exists());
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert!(rec["test_accuracy"].is_number());
    let meta = tcnl_core::net::load_checkpoint(&run.join("final.ckpt")).unwrap().meta;
    assert_eq!(meta["disable_concept_constraint"], false);

    let o = tcnl(&[
        "train",
        "--config",
        &f.s("config.json"),
        "--data",
        &f.s("data"),
        "--out",
        &f.s("twin"),
        "--no-concept-constraint",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let twin = tcnl_core::net::load_checkpoint(&f.path("twin/best.ckpt")).unwrap().meta;
    assert_eq!(twin["disable_concept_constraint"], true);
    assert_eq!(twin["config_hash"], meta["config_hash"]);
}

#[test]
fn non_finite_loss_exits_3_naming_the_component() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", "1")), 0);
    let cfg = TINY.replace(r#""epochs": 1,"#, r#""epochs": 3, "learning_rate": 1e30,"#);
    fs::write(f.path("wild.json"), cfg).unwrap();
    let o = tcnl(&["train", "--config", &f.s("wild.json"), "--data", &f.s("data"), "--out", &f.s("r")]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    assert!(!f.path("r/final.ckpt").exists());
}

#[test]
fn eval_report_has_fixed_keys_and_is_reproducible() {
    let f = Fixture::new();
    let run = f.trained();
    let ckpt = run.join("final.ckpt").to_string_lossy().into_owned();
    let eval = |out: &str| {
        let o = tcnl(&["eval", "--checkpoint", &ckpt, "--data", &f.s("data"), "--out", &f.s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("CRNP"));
        fs::read(f.path(out)).unwrap()
    };
    let (a, b) = (eval("a.json"), eval("b.json"));
    assert_eq!(a, b);
    let r: serde_json::Value = serde_json::from_slice(&a).unwrap();
    for key in ["crnp", "mse_255", "ssim", "accuracy", "concept_weights", "n_images"] {
        assert!(r.get(key).is_some(), "{key}");
    }
    let sum: f64 = r["concept_weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() <= 1e-9);
    assert_eq!(r["n_images"], 4);

    let o = tcnl(&["eval", "--checkpoint", &ckpt, "--data", &f.s("data")]);
    assert_eq!(code(&o), 0);
    assert!(run.join("final.report.json").is_file());
}

#[test]
fn visualize_writes_pairs_and_a_montage() {
    let f = Fixture::new();
    let run = f.trained();
    let o = tcnl(&[
        "visualize",
        "--checkpoint",
        &run.join("best.ckpt").to_string_lossy(),
        "--data",
        &f.s("data"),
        "--index",
        "2",
        "--out",
        &f.s("vis"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names: Vec<String> = fs::read_dir(f.path("vis")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with("_pair.ppm")).count(), 4);
    assert_eq!(names.iter().filter(|n| n.ends_with("_montage.ppm")).count(), 1);
    let pair = fs::read(f.path("vis/00002_head_pair.ppm")).unwrap();
    assert!(pair.starts_with(b"P6\n64 32\n255\n"));

    let o = tcnl(&[
        "visualize",
        "--checkpoint",
        &run.join("best.ckpt").to_string_lossy(),
        "--data",
        &f.s("data"),
        "--index",
        "99",
        "--out",
        &f.s("vis"),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_reports_two_rows_and_keeps_both_checkpoints() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", "1")), 0);
    let o = tcnl(&["ablate", "--config", &f.s("config.json"), "--data", &f.s("data"), "--out", &f.s("ab")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(f.path("ab/ablation.json")).unwrap()).unwrap();
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["config_hash"], rows[1]["config_hash"]);
    assert_eq!(rows[0]["disable_concept_constraint"], false);
    assert_eq!(rows[1]["disable_concept_constraint"], true);
    assert_eq!(r["direction"].as_array().unwrap().len(), 4);
    for v in ["constrained", "ablated"] {
        assert!(f.path(&format!("ab/{v}/final.ckpt")).is_file());
        assert!(f.path(&format!("ab/{v}/best.ckpt")).is_file());
    }
}

#[test]
fn gradcheck_passes_clean_and_names_a_corrupted_op() {
    let f = Fixture::new();
    let quick = ["gradcheck", "--seeds", "2", "--composed-seeds", "1", "--adjoint-configs", "5"];
    let mut args = quick.to_vec();
    let json = f.s("gc.json");
    args.extend(["--json", &json]);
    let o = tcnl(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("conv_transpose2d") && out.contains("max_rel_error"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(f.path("gc.json")).unwrap()).unwrap();
    assert!(report["primitives"].as_array().unwrap().iter().all(|c| c["max_rel_error"].is_number()));

    let mut args = quick.to_vec();
    args.extend(["--corrupt-op", "maxpool2d"]);
    let o = tcnl(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("maxpool2d"), "{}", stderr(&o));

    let mut args = quick.to_vec();
    args.extend(["--corrupt-op", "nonsense"]);
    assert_eq!(code(&tcnl(&args)), 2);
}

#[test]
fn interrupted_training_leaves_no_partial_checkpoint() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("data", "1")), 0);
    let cfg = TINY.replace(r#""epochs": 1"#, r#""epochs": 200"#);
    fs::write(f.path("long.json"), cfg).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_tcnl"))
        .args(["train", "--config", &f.s("long.json"), "--data", &f.s("data"), "--out", &f.s("r")])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(60);
    while !f.path("r/history.jsonl").exists() && std::time::Instant::now() < deadline {
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    for name in ["best.ckpt", "final.ckpt"] {
        let p = f.path(&format!("r/{name}"));
        if p.exists() {
            assert!(tcnl_core::net::load_checkpoint(&p).is_ok());
        }
    }
    let history = fs::read_to_string(f.path("r/history.jsonl")).unwrap();
    for line in history.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}
