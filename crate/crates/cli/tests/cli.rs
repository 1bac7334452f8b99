use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn hatnet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hatnet"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

/// Every file below `dir` with its contents.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL_CONFIG: &str = r#"{
  "model": {"tiling": {"n": 4, "m": 4, "bag_px": 16, "word_px": 8, "d": 16}, "heads": 2, "channels": 1},
  "train": {"lr_start": 1e-5, "lr_peak": 5e-4, "warmup_iters": 10,
            "epochs_phase1": 80, "epochs_phase2": 20, "accum_steps": 1, "augment": false},
  "synth": {"samples_per_class": 2, "bag_grid": 2, "word_grid": 2, "word_px": 8,
            "splits": [1.0, 0.0, 0.0]},
  "seed": 3
}"#;

struct Workspace {
    _root: tempfile::TempDir,
    cwd: PathBuf,
    config: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

fn workspace() -> Workspace {
    let root = tempfile::tempdir().unwrap();
    let cwd = root.path().join("cwd");
    fs::create_dir(&cwd).unwrap();
    let config = root.path().join("config.json");
    fs::write(&config, SMALL_CONFIG).unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    Workspace {
        cwd,
        config,
        data,
        run,
        _root: root,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_attn_pipeline() {
    let w = workspace();
    let synth = ok_json(&hatnet(&w.cwd, &["synth", "--config", s(&w.config), "--out", s(&w.data)]));
    assert_eq!(synth["samples"], 8);
    assert_eq!(synth["train"], 8);
    let data_before = snapshot(&w.data);

    let train = ok_json(&hatnet(
        &w.cwd,
        &["train", "--config", s(&w.config), "--data", s(&w.data), "--out", s(&w.run)],
    ));
    assert_eq!(train["selection"], "train");
    for f in ["config.json", "train_log.jsonl", "summary.json", "checkpoint/manifest.json", "last/manifest.json"] {
        assert!(w.run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(w.run.join("train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["lr"].is_number() && first["val_accuracy"].is_null());

    let eval_out = w.run.join("eval");
    let ckpt = w.run.join("checkpoint");
    let eval = ok_json(&hatnet(
        &w.cwd,
        &["eval", "--checkpoint", s(&ckpt), "--data", s(&w.data), "--out", s(&eval_out), "--split", "train"],
    ));
    assert_eq!(eval["accuracy"], 1.0);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(eval_out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["accuracy"], 1.0);
    assert_eq!(metrics["per_class"].as_array().unwrap().len(), 4);
    let csv = fs::read_to_string(eval_out.join("dice_bag.csv")).unwrap();
    assert!(csv.starts_with("k_percent,class,dice,samples\n"));
    assert!(eval_out.join("dice_word_unrestricted.csv").is_file());

    let attn_out = w.run.join("attn");
    let input = w.data.join("c0_0000.htnt");
    let attn = ok_json(&hatnet(
        &w.cwd,
        &["attn", "--checkpoint", s(&ckpt), "--input", s(&input), "--top-k", "30", "--out", s(&attn_out)],
    ));
    // ceil(0.3 * 4) bags
    assert_eq!(attn["count"], 2);
    for f in ["topk.json", "bag_coeffs.csv", "word_coeffs.csv", "bag_heatmap.png", "word_heatmap.png"] {
        assert!(attn_out.join(f).is_file(), "missing {f}");
    }
    let words = ok_json(&hatnet(
        &w.cwd,
        &["attn", "--checkpoint", s(&ckpt), "--input", s(&input), "--top-k", "50", "--level", "word", "--out", s(&attn_out)],
    ));
    assert_eq!(words["count"], 8);
    assert_eq!(words["indices"][0].as_array().unwrap().len(), 2);

    assert!(fs::read_dir(&w.cwd).unwrap().next().is_none(), "wrote into the working directory");
    assert_eq!(snapshot(&w.data), data_before, "modified the dataset directory");
}

#[test]
fn png_input_is_tiled() {
    let w = workspace();
    ok_json(&hatnet(&w.cwd, &["synth", "--config", s(&w.config), "--out", s(&w.data)]));
    let cfg = w.run.join("one_epoch.json");
    let text = SMALL_CONFIG.replace("\"epochs_phase1\": 80, \"epochs_phase2\": 20", "\"epochs_phase1\": 1, \"epochs_phase2\": 0");
    fs::create_dir_all(&w.run).unwrap();
    fs::write(&cfg, text).unwrap();
    let out = w.run.join("train");
    ok_json(&hatnet(&w.cwd, &["train", "--config", s(&cfg), "--data", s(&w.data), "--out", s(&out)]));
    let png = w.run.join("in.png");
    image::GrayImage::from_fn(40, 30, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8])).save(&png).unwrap();
    let attn_out = w.run.join("attn");
    let r = ok_json(&hatnet(
        &w.cwd,
        &["attn", "--checkpoint", s(&out.join("checkpoint")), "--input", s(&png), "--out", s(&attn_out)],
    ));
    assert_eq!(r["count"], 2);
}

#[test]
fn runs_are_byte_reproducible() {
    let w = workspace();
    let second = w.run.join("data2");
    ok_json(&hatnet(&w.cwd, &["synth", "--config", s(&w.config), "--out", s(&w.data)]));
    ok_json(&hatnet(&w.cwd, &["synth", "--config", s(&w.config), "--out", s(&second)]));
    assert_eq!(snapshot(&w.data), snapshot(&second));
    let other = w.run.join("data3");
    ok_json(&hatnet(&w.cwd, &["synth", "--config", s(&w.config), "--out", s(&other), "--seed", "4"]));
    assert_ne!(snapshot(&w.data), snapshot(&other));

    let cfg = w.run.join("short.json");
    let text = SMALL_CONFIG.replace("\"epochs_phase1\": 80, \"epochs_phase2\": 20", "\"epochs_phase1\": 3, \"epochs_phase2\": 2");
    fs::write(&cfg, text).unwrap();
    let (a, b) = (w.run.join("a"), w.run.join("b"));
    for out in [&a, &b] {
        ok_json(&hatnet(&w.cwd, &["train", "--config", s(&cfg), "--data", s(&w.data), "--out", s(out)]));
    }
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn bench_reports_mean_and_std() {
    let w = workspace();
    let out = w.run.join("bench");
    let r = ok_json(&hatnet(&w.cwd, &["bench", "--config", s(&w.config), "--trials", "2", "--out", s(&out)]));
    assert!(r["mean_s"].as_f64().unwrap() > 0.0);
    assert!(r["std_s"].as_f64().unwrap() >= 0.0);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["trials"], 2);
    assert_eq!(report["samples_s"].as_array().unwrap().len(), 2);
    let table = fs::read_to_string(out.join("bench.md")).unwrap();
    assert!(table.contains(" s ± ") && table.contains(" ms |"), "{table}");
}

#[test]
fn failures_are_reported_as_json() {
    let w = workspace();
    let bad = w.cwd.parent().unwrap().join("bad.json");
    fs::write(&bad, r#"{"model": {"heads": 5}}"#).unwrap();
    let out = w.run.join("x");
    let e = err_json(&hatnet(&w.cwd, &["synth", "--config", s(&bad), "--out", s(&out)]));
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("heads"));

    fs::write(&bad, r#"{"train": {"warmup": 3}}"#).unwrap();
    let e = err_json(&hatnet(&w.cwd, &["synth", "--config", s(&bad), "--out", s(&out)]));
    assert!(e["error"]["message"].as_str().unwrap().contains("train"));

    let e = err_json(&hatnet(&w.cwd, &["synth", "--config", s(&w.config)]));
    assert_eq!(e["error"]["kind"], "usage");

    let usage = hatnet(&w.cwd, &["train", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(err_json(&usage)["error"]["kind"], "usage");

    let e = err_json(&hatnet(&w.cwd, &["eval", "--checkpoint", "/nonexistent", "--data", "/nonexistent", "--out", s(&out)]));
    assert_eq!(e["error"]["kind"], "io");
    assert!(fs::read_dir(&w.cwd).unwrap().next().is_none());
}
