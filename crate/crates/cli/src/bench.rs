use std::path::Path;

use hatnet::eval::{benchmark, WARMUP_PASSES};
use hatnet::model::{load_checkpoint, EncoderKind, Hatnet, Input, TiledImage};
use hatnet::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::commands::{load_config, out_dir, write_json, write_text};
use crate::failure::Failure;
use crate::Common;

pub fn bench(common: &Common, checkpoint: Option<&Path>, trials: usize) -> Result<Value, Failure> {
    let cfg = load_config(common)?;
    let seed = cfg.init_seed();
    let (model, params): (Hatnet, ParamStore<f32>) = match checkpoint {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            (Hatnet::new(ckpt.config)?, ckpt.params)
        }
        None => {
            let model = Hatnet::new(cfg.model.clone())?;
            let params = model.init_params(seed);
            (model, params)
        }
    };
    let out = out_dir(&cfg)?;

    let t = model.config.tiling;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dims, lo) = match model.config.encoder {
        EncoderKind::Toy => (vec![t.n, t.m, t.word_px, t.word_px, model.config.channels], 0.0),
        EncoderKind::Precomputed => (vec![t.n, t.m, t.d], -1.0),
    };
    let len: usize = dims.iter().product();
    let data: Vec<f32> = (0..len).map(|_| rng.random_range(lo..1.0)).collect();
    let tensor = Tensor::new(dims, data)?;
    let tiled;
    let input = match model.config.encoder {
        EncoderKind::Toy => {
            tiled = TiledImage::from_words(tensor, t)?;
            Input::Words(&tiled)
        }
        EncoderKind::Precomputed => Input::Features(&tensor),
    };

    let stats = benchmark(|| model.forward(&params, input).map(|_| ()), trials)?;
    let display = stats.display();
    let report = json!({
        "trials": stats.trials,
        "warmup": WARMUP_PASSES,
        "mean_s": stats.mean_s,
        "std_s": stats.std_s,
        "cv": stats.coefficient_of_variation(),
        "display": display,
        "n": t.n,
        "m": t.m,
        "d": t.d,
        "encoder": model.config.encoder,
        "samples_s": stats.samples_s,
    });
    write_json(&out.join("bench.json"), &report)?;
    let table = format!(
        "| Model | Bags (n) | Words per bag (m) | Inference time |\n|---|---|---|---|\n| HATNet ({}) | {} | {} | {display} |\n",
        model.config.psi.name(),
        t.n,
        t.m,
    );
    write_text(&out.join("bench.md"), &table)?;
    Ok(json!({
        "command": "bench",
        "trials": stats.trials,
        "mean_s": stats.mean_s,
        "std_s": stats.std_s,
        "cv": stats.coefficient_of_variation(),
        "display": display,
    }))
}
