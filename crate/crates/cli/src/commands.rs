use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hatnet::config::{parse_config, RunConfig};
use hatnet::data::{Dataset, Sample, SampleData, Split};
use hatnet::eval::{attention_overlap, confusion, dice_sweep, report, sweep_csv, OverlapMode, RegionMask};
use hatnet::model::{load_checkpoint, save_checkpoint, EncoderKind, Hatnet, ModelConfig};
use hatnet::synth::generate;
use hatnet::train::{accuracy, fit};
use serde_json::{json, Value};

use crate::failure::Failure;
use crate::Common;

/// Top-k percentages of the dice sweep.
pub const SWEEP_KS: [f64; 6] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0];

pub fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
        cfg.resolve_seed();
    }
    if common.data.is_some() {
        cfg.paths.data = common.data.clone();
    }
    if common.out.is_some() {
        cfg.paths.out = common.out.clone();
    }
    Ok(cfg)
}

pub fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let out = cfg.paths.out.clone().ok_or_else(|| Failure::usage("an output directory is required (--out)"))?;
    fs::create_dir_all(&out).map_err(|e| Failure::io(&out, e))?;
    Ok(out)
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    cfg.paths.data.clone().ok_or_else(|| Failure::usage("a dataset directory is required (--data)"))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// The configured model with geometry, class count and encoder taken from the dataset.
pub fn model_for_dataset(base: &ModelConfig, ds: &Dataset) -> Result<ModelConfig, Failure> {
    let first = ds.samples.first().ok_or_else(|| Failure::new("contract", "dataset has no samples"))?;
    let mut cfg = base.clone();
    cfg.classes = ds.classes;
    cfg.tiling.n = ds.tiling.n;
    cfg.tiling.m = ds.tiling.m;
    cfg.tiling.bag_px = ds.tiling.bag_px;
    cfg.tiling.word_px = ds.tiling.word_px;
    match &first.data {
        SampleData::Words(t) => {
            cfg.encoder = EncoderKind::Toy;
            cfg.channels = t.channels();
        }
        SampleData::Features(f) => {
            cfg.encoder = EncoderKind::Precomputed;
            cfg.tiling.d = f.dims()[2];
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(common: &Common) -> Result<Value, Failure> {
    let mut cfg = load_config(common)?;
    let ds = Dataset::load(data_dir(&cfg)?)?;
    cfg.model = model_for_dataset(&cfg.model, &ds)?;
    let out = out_dir(&cfg)?;
    let mut recorded = cfg.clone();
    recorded.paths.out = None;
    write_json(&out.join("config.json"), &recorded)?;

    let model = Hatnet::new(cfg.model.clone())?;
    let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
    if train.is_empty() {
        return Err(Failure::new("contract", "dataset has no train samples"));
    }
    let log_path = out.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| Failure::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let outcome = fit(
        &model,
        model.init_params::<f32>(cfg.init_seed()),
        &train,
        &val,
        &cfg.train,
        Some(&mut log),
        |_, _| false,
    )?;
    log.flush().map_err(|e| Failure::io(&log_path, e))?;

    let selection = if val.is_empty() { "train" } else { "val" };
    let kept: Vec<Value> = outcome
        .checkpoints
        .iter()
        .map(|c| json!({"epoch": c.epoch, "accuracy": c.val_accuracy}))
        .collect();
    let meta = json!({"averaged": kept, "selection": selection, "epochs_run": outcome.records.len()});
    save_checkpoint(out.join("checkpoint"), &cfg.model, &outcome.params, meta)?;
    let last_epoch = outcome.records.last().map(|r| r.epoch);
    save_checkpoint(out.join("last"), &cfg.model, &outcome.last, json!({"epoch": last_epoch}))?;

    let summary = json!({
        "command": "train",
        "epochs_run": outcome.records.len(),
        "updates": outcome.records.last().map(|r| r.iter),
        "final_loss": outcome.records.last().map(|r| r.loss),
        "train_accuracy": accuracy(&model, &outcome.params, &train)?,
        "val_accuracy": accuracy(&model, &outcome.params, &val)?,
        "selection": selection,
        "averaged": kept,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn parse_split(name: &str) -> Result<Option<Split>, Failure> {
    match name {
        "all" => Ok(None),
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        other => Err(Failure::usage(format!("unknown split `{other}` (train, val, test or all)"))),
    }
}

pub fn eval(common: &Common, checkpoint: &Path, split: &str) -> Result<Value, Failure> {
    let cfg = load_config(common)?;
    let split = parse_split(split)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = Dataset::load(data_dir(&cfg)?)?;
    let out = out_dir(&cfg)?;
    let model = Hatnet::new(ckpt.config.clone())?;
    let samples: Vec<&Sample> = match split {
        Some(s) => ds.split(s),
        None => ds.samples.iter().collect(),
    };
    if samples.is_empty() {
        return Err(Failure::new("contract", "selected split has no samples"));
    }

    let (mut preds, mut labels, mut scores, mut records) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut lines = String::from("id,label,prediction");
    for c in 0..model.config.classes {
        lines.push_str(&format!(",p{c}"));
    }
    lines.push('\n');
    for s in &samples {
        let (pred, rec) = model.forward(&ckpt.params, s.input())?;
        lines.push_str(&format!("{},{},{}", s.id, s.label, pred.class));
        for p in &pred.probs {
            lines.push_str(&format!(",{p:.6}"));
        }
        lines.push('\n');
        preds.push(pred.class);
        labels.push(s.label);
        scores.push(pred.probs);
        records.push(rec);
    }
    let cm = confusion(&preds, &labels, model.config.classes)?;
    let metrics = report(&cm, &scores, &labels)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_text(&out.join("predictions.csv"), &lines)?;

    let mut overlap = serde_json::Map::new();
    let (n, m) = (model.config.tiling.n, model.config.tiling.m);
    for (level, masks) in [("bag", bag_masks(&samples)), ("word", word_masks(&samples, n, m)?)] {
        let Some(masks) = masks else { continue };
        let items: Vec<_> = records.iter().zip(&masks).zip(&samples).map(|((r, k), s)| (r, k, s.label)).collect();
        for (mode, suffix) in [(OverlapMode::Restricted, ""), (OverlapMode::Unrestricted, "_unrestricted")] {
            let rows = dice_sweep(&items, &SWEEP_KS, mode)?;
            write_text(&out.join(format!("dice_{level}{suffix}.csv")), &sweep_csv(&rows))?;
        }
        let at50 = |mode| -> Result<f64, Failure> {
            let mut sum = 0.0;
            for (r, k, _) in &items {
                sum += attention_overlap(r, k, 50.0, mode)?.dice;
            }
            Ok(sum / items.len() as f64)
        };
        overlap.insert(
            level.to_string(),
            json!({
                "dice_top50_restricted": at50(OverlapMode::Restricted)?,
                "dice_top50_unrestricted": at50(OverlapMode::Unrestricted)?,
            }),
        );
    }
    if !overlap.is_empty() {
        write_json(&out.join("overlap.json"), &overlap)?;
    }
    Ok(json!({
        "command": "eval",
        "samples": metrics.samples,
        "accuracy": metrics.accuracy,
        "macro_f1": metrics.macro_f1,
        "macro_auc": metrics.macro_auc,
        "overlap": overlap,
    }))
}

fn bag_masks(samples: &[&Sample]) -> Option<Vec<RegionMask>> {
    samples.iter().map(|s| s.bag_mask.clone().map(RegionMask::bags)).collect()
}

fn word_masks(samples: &[&Sample], n: usize, m: usize) -> Result<Option<Vec<RegionMask>>, Failure> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        match &s.word_mask {
            Some(w) => out.push(RegionMask::words(n, m, w.clone())?),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

pub fn synth(common: &Common) -> Result<Value, Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(&cfg)?;
    let ds = generate(&cfg.synth)?;
    ds.save(&out)?;
    let count = |s| ds.samples.iter().filter(|x| x.split == s).count();
    Ok(json!({
        "command": "synth",
        "samples": ds.samples.len(),
        "classes": ds.classes,
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
        "motif_bags": cfg.synth.motif_bags(),
        "motif_words_per_bag": cfg.synth.motif_words(),
        "tiling": ds.tiling,
    }))
}
