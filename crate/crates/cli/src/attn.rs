use std::path::Path;

use hatnet::eval::Level;
use hatnet::model::{load_checkpoint, tile_image, top_k_bags, top_k_words, AttentionRecord, EncoderKind, Hatnet, Image, Input, TiledImage};
use hatnet::tensor::{io, Tensor};
use image::{GrayImage, Luma};
use serde_json::{json, Value};

use crate::commands::{load_config, out_dir, write_json, write_text};
use crate::failure::Failure;
use crate::Common;

/// Target side of the heatmap images in pixels.
const HEATMAP_SIDE: usize = 256;

enum Loaded {
    Words(TiledImage),
    Features(Tensor<f32>),
}

fn load_input(path: &Path, model: &Hatnet) -> Result<Loaded, Failure> {
    let cfg = &model.config;
    let is_htnt = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("htnt"));
    if is_htnt {
        let t = io::load(path)?;
        return match t.dims().len() {
            5 => Ok(Loaded::Words(TiledImage::from_words(t, cfg.tiling)?)),
            3 => Ok(Loaded::Features(t)),
            _ => Err(Failure::new(
                "shape",
                format!("input tensor has dims {:?}; expected [n, m, P, P, c] or [n, m, d]", t.dims()),
            )),
        };
    }
    if cfg.encoder != EncoderKind::Toy {
        return Err(Failure::usage("this model takes precomputed features; pass an .htnt tensor"));
    }
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let image = match cfg.channels {
        1 => Image::new(w, h, 1, img.to_luma32f().into_raw())?,
        3 => Image::new(w, h, 3, img.to_rgb32f().into_raw())?,
        c => return Err(Failure::usage(format!("cannot read an image file for a {c}-channel model"))),
    };
    Ok(Loaded::Words(tile_image(&image, &cfg.tiling)?))
}

/// Near-square grid placement: `count` cells in rows of `ceil(sqrt(count))`.
fn grid_side(count: usize) -> usize {
    (1..=count).find(|s| s * s >= count).unwrap_or(1)
}

/// Grid position of every word, with words placed inside their bag's cell.
fn word_positions(n: usize, m: usize) -> (usize, Vec<(usize, usize)>) {
    let (gb, gw) = (grid_side(n), grid_side(m));
    let mut pos = Vec::with_capacity(n * m);
    for b in 0..n {
        for w in 0..m {
            pos.push(((b % gb) * gw + w % gw, (b / gb) * gw + w / gw));
        }
    }
    (gb * gw, pos)
}

/// Min-max scaled grayscale grid; cells without a value stay black.
fn heatmap(side: usize, cells: &[((usize, usize), f64)]) -> GrayImage {
    let scale = (HEATMAP_SIDE / side).max(1);
    let lo = cells.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let hi = cells.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = (side * scale) as u32;
    let mut img = GrayImage::new(px, px);
    for &((x, y), v) in cells {
        let level = if hi > lo { ((v - lo) / span * 255.0).round() as u8 } else { 255 };
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel((x * scale + dx) as u32, (y * scale + dy) as u32, Luma([level]));
            }
        }
    }
    img
}

fn write_maps(out: &Path, rec: &AttentionRecord) -> Result<(), Failure> {
    let (n, m) = (rec.n(), rec.m());
    let gb = grid_side(n);
    let bags = rec.bag_coeffs.data();
    let mut csv = String::from("bag,row,col,coeff\n");
    let mut cells = Vec::with_capacity(n);
    for (b, &v) in bags.iter().enumerate() {
        csv.push_str(&format!("{b},{},{},{v:.8}\n", b / gb, b % gb));
        cells.push(((b % gb, b / gb), v));
    }
    write_text(&out.join("bag_coeffs.csv"), &csv)?;
    let path = out.join("bag_heatmap.png");
    heatmap(gb, &cells).save(&path).map_err(|e| Failure::io(&path, e))?;

    let (side, pos) = word_positions(n, m);
    let words = rec.word_coeffs.data();
    let mut csv = String::from("bag,word,row,col,coeff\n");
    let mut cells = Vec::with_capacity(n * m);
    for (i, &v) in words.iter().enumerate() {
        let (x, y) = pos[i];
        csv.push_str(&format!("{},{},{y},{x},{v:.8}\n", i / m, i % m));
        cells.push(((x, y), v));
    }
    write_text(&out.join("word_coeffs.csv"), &csv)?;
    let path = out.join("word_heatmap.png");
    heatmap(side, &cells).save(&path).map_err(|e| Failure::io(&path, e))?;
    Ok(())
}

pub fn attn(common: &Common, checkpoint: &Path, input: &Path, top_k: f64, level: &str) -> Result<Value, Failure> {
    let cfg = load_config(common)?;
    let level: Level = level.parse()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let model = Hatnet::new(ckpt.config.clone())?;
    let loaded = load_input(input, &model)?;
    let inp = match &loaded {
        Loaded::Words(t) => Input::Words(t),
        Loaded::Features(f) => Input::Features(f),
    };
    let (pred, rec) = model.forward(&ckpt.params, inp)?;
    let indices = match level {
        Level::Bag => json!(top_k_bags(&rec, top_k)?),
        Level::Word => json!(top_k_words(&rec, top_k)?),
    };
    let count = indices.as_array().map_or(0, Vec::len);
    let out = out_dir(&cfg)?;
    let top = json!({
        "level": level.name(),
        "k_percent": top_k,
        "count": count,
        "indices": indices,
        "prediction": {"class": pred.class, "probs": pred.probs},
    });
    write_json(&out.join("topk.json"), &top)?;
    write_maps(&out, &rec)?;
    Ok(json!({"command": "attn", "level": level.name(), "count": count, "indices": top["indices"], "class": pred.class}))
}
