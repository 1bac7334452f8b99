//! Per-word augmentation: random resize round-trip, flips and small rotations.

use rand::Rng;

use crate::model::{Image, TiledImage};
use crate::tensor::Tensor;

/// Resize targets relative to the word side; at 256 px these are 192..320.
pub const RESIZE_FACTORS: [f64; 5] = [0.75, 0.875, 1.0, 1.125, 1.25];
pub const MAX_ANGLE_DEG: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub resize_to: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub fn identity(word_px: usize) -> Self {
        Self {
            resize_to: word_px,
            hflip: false,
            vflip: false,
            angle_deg: 0.0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, word_px: usize) -> Self {
        let f = RESIZE_FACTORS[rng.random_range(0..RESIZE_FACTORS.len())];
        Self {
            resize_to: ((word_px as f64 * f).round() as usize).max(1),
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ANGLE_DEG..=MAX_ANGLE_DEG),
        }
    }

    pub fn apply(&self, word: &Image) -> Image {
        let (w, h) = (word.width, word.height);
        let mut out = if self.resize_to != w {
            word.resize(self.resize_to, self.resize_to)
                .and_then(|r| r.resize(w, h))
                .expect("positive sizes")
        } else {
            word.clone()
        };
        if self.hflip {
            out = out.flip_horizontal();
        }
        if self.vflip {
            out = out.flip_vertical();
        }
        if self.angle_deg != 0.0 {
            out = rotate_reflect(&out, self.angle_deg);
        }
        out
    }
}

/// Mirror a continuous pixel-centre coordinate into `[0, len - 1]`.
fn reflect(x: f64, len: usize) -> f64 {
    if len == 1 {
        return 0.0;
    }
    let period = 2.0 * (len - 1) as f64;
    let r = x.rem_euclid(period);
    if r > (len - 1) as f64 {
        period - r
    } else {
        r
    }
}

/// Rotation about the image centre with bilinear sampling and mirrored borders.
pub fn rotate_reflect(img: &Image, angle_deg: f64) -> Image {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    Image::from_fn(img.width, img.height, img.channels, |x, y, ch| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        // inverse map: rotate the output position back by -angle
        let sx = c * dx + s * dy + cx;
        let sy = -s * dx + c * dy + cy;
        img.sample_clamped(reflect(sx, img.width), reflect(sy, img.height), ch) as f32
    })
    .expect("same geometry")
}

pub fn augment_word<R: Rng>(word: &Image, rng: &mut R) -> Image {
    AugmentParams::sample(rng, word.width).apply(word)
}

/// Augments every word of a tiled image independently.
pub fn augment_tiled<R: Rng>(tiled: &TiledImage, rng: &mut R) -> TiledImage {
    let mut data = Vec::with_capacity(tiled.words.numel());
    for bag in 0..tiled.tiling.n {
        for word in 0..tiled.tiling.m {
            data.extend(augment_word(&tiled.word(bag, word), rng).data);
        }
    }
    TiledImage {
        words: Tensor::new(tiled.words.dims().to_vec(), data).expect("same dims"),
        tiling: tiled.tiling,
    }
}
