use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bag and word geometry plus the embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    /// Bags per image, laid out on a square grid.
    pub n: usize,
    /// Words per bag, laid out on a square grid.
    pub m: usize,
    pub bag_px: usize,
    pub word_px: usize,
    pub d: usize,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            n: 49,
            m: 49,
            bag_px: 1792,
            word_px: 256,
            d: 256,
        }
    }
}

fn exact_sqrt(v: usize) -> Option<usize> {
    let r = (v as f64).sqrt().round() as usize;
    (r * r == v).then_some(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl TilingConfig {
    /// Geometry for a square image of side `side`.
    pub fn for_image(side: usize, bag_px: usize, word_px: usize, d: usize) -> Result<Self> {
        if side == 0 || bag_px == 0 || word_px == 0 {
            return Err(Error::config("tiling", "pixel sizes must be positive"));
        }
        if side % bag_px != 0 {
            return Err(Error::config("bag_px", format!("{bag_px} does not divide image side {side}")));
        }
        if bag_px % word_px != 0 {
            return Err(Error::config("word_px", format!("{word_px} does not divide bag side {bag_px}")));
        }
        let (gb, gw) = (side / bag_px, bag_px / word_px);
        let cfg = Self {
            n: gb * gb,
            m: gw * gw,
            bag_px,
            word_px,
            d,
        };
        cfg.validate_geometry()?;
        Ok(cfg)
    }

    /// Counts and sizes are positive. Enough for feature-only models.
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("n", self.n), ("m", self.m), ("word_px", self.word_px), ("d", self.d)] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }

    /// Full pixel-geometry check used before tiling.
    pub fn validate_geometry(&self) -> Result<()> {
        self.validate()?;
        let gw = self.word_grid()?;
        self.bag_grid()?;
        if self.bag_px != gw * self.word_px {
            return Err(Error::config(
                "bag_px",
                format!(
                    "bag side {} must equal word grid {} x word side {}",
                    self.bag_px, gw, self.word_px
                ),
            ));
        }
        Ok(())
    }

    pub fn bag_grid(&self) -> Result<usize> {
        exact_sqrt(self.n).ok_or_else(|| Error::config("n", format!("{} is not a square grid", self.n)))
    }

    pub fn word_grid(&self) -> Result<usize> {
        exact_sqrt(self.m).ok_or_else(|| Error::config("m", format!("{} is not a square grid", self.m)))
    }

    pub fn image_side(&self) -> Result<usize> {
        Ok(self.bag_grid()? * self.bag_px)
    }

    pub fn num_words(&self) -> usize {
        self.n * self.m
    }

    pub fn bag_rect(&self, bag: usize) -> Result<Rect> {
        let gb = self.bag_grid()?;
        if bag >= self.n {
            return Err(Error::Index { what: "bag", index: bag, bound: self.n });
        }
        Ok(Rect {
            x: (bag % gb) * self.bag_px,
            y: (bag / gb) * self.bag_px,
            width: self.bag_px,
            height: self.bag_px,
        })
    }

    pub fn word_rect(&self, bag: usize, word: usize) -> Result<Rect> {
        let b = self.bag_rect(bag)?;
        let gw = self.word_grid()?;
        if word >= self.m {
            return Err(Error::Index { what: "word", index: word, bound: self.m });
        }
        Ok(Rect {
            x: b.x + (word % gw) * self.word_px,
            y: b.y + (word / gw) * self.word_px,
            width: self.word_px,
            height: self.word_px,
        })
    }
}

/// Image cut into `n` bags of `m` words: `words` is `[n, m, P, P, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TiledImage {
    pub words: Tensor<f32>,
    pub tiling: TilingConfig,
}

impl TiledImage {
    pub fn from_words(words: Tensor<f32>, tiling: TilingConfig) -> Result<Self> {
        tiling.validate()?;
        let d = words.dims();
        if d.len() != 5 || d[0] != tiling.n || d[1] != tiling.m || d[2] != tiling.word_px || d[3] != tiling.word_px {
            return Err(Error::shape(
                "tiled words",
                d,
                &[tiling.n, tiling.m, tiling.word_px, tiling.word_px],
            ));
        }
        Ok(Self { words, tiling })
    }

    pub fn channels(&self) -> usize {
        self.words.dims()[4]
    }

    /// Pixels of one word as an image.
    pub fn word(&self, bag: usize, word: usize) -> Image {
        let (p, c) = (self.tiling.word_px, self.channels());
        let len = p * p * c;
        let start = (bag * self.tiling.m + word) * len;
        Image::new(p, p, c, self.words.data()[start..start + len].to_vec()).expect("word geometry")
    }

    /// Reassembles the (resized) source image.
    pub fn untile(&self) -> Result<Image> {
        let side = self.tiling.image_side()?;
        let (p, c) = (self.tiling.word_px, self.channels());
        let mut img = Image::filled(side, side, c, 0.0)?;
        for bag in 0..self.tiling.n {
            for word in 0..self.tiling.m {
                let r = self.tiling.word_rect(bag, word)?;
                let src = self.word(bag, word);
                for y in 0..p {
                    let dst = ((r.y + y) * side + r.x) * c;
                    img.data[dst..dst + p * c].copy_from_slice(&src.data[y * p * c..(y + 1) * p * c]);
                }
            }
        }
        Ok(img)
    }
}

/// Resizes `image` to the configured square side (bilinear) and cuts it into
/// bags and words in row-major order.
pub fn tile_image(image: &Image, tiling: &TilingConfig) -> Result<TiledImage> {
    tiling.validate_geometry()?;
    let side = tiling.image_side()?;
    let img = image.resize(side, side)?;
    let (p, c) = (tiling.word_px, img.channels);
    let mut data = Vec::with_capacity(side * side * c);
    for bag in 0..tiling.n {
        for word in 0..tiling.m {
            let r = tiling.word_rect(bag, word)?;
            for y in 0..p {
                let src = ((r.y + y) * side + r.x) * c;
                data.extend_from_slice(&img.data[src..src + p * c]);
            }
        }
    }
    let words = Tensor::new(vec![tiling.n, tiling.m, p, p, c], data)?;
    Ok(TiledImage { words, tiling: *tiling })
}
