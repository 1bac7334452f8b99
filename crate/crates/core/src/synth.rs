//! Planted-motif synthetic images.
//!
//! Every image is a flat grey background with Gaussian pixel noise. A fixed
//! number of bags carry the class motif in a fixed number of their words;
//! the class is the motif identity. Motifs cycle through horizontal stripes,
//! vertical stripes, a checkerboard and a dot grid, and classes beyond four
//! reuse those shapes with a longer period.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, SampleData, Split};
use crate::error::{Error, Result};
use crate::model::{TiledImage, TilingConfig};
use crate::tensor::Tensor;

pub const BACKGROUND: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Bags per side.
    pub bag_grid: usize,
    /// Words per bag side.
    pub word_grid: usize,
    pub word_px: usize,
    pub channels: usize,
    /// Fraction of bags that carry the motif.
    pub bag_density: f64,
    /// Fraction of words inside a motif bag that carry the motif.
    pub word_density: f64,
    /// Motif amplitude around the background level.
    pub contrast: f64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Train / val / test fractions, applied per class.
    pub splits: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples_per_class: 50,
            bag_grid: 4,
            word_grid: 4,
            word_px: 32,
            channels: 1,
            bag_density: 0.5,
            word_density: 0.5,
            contrast: 0.4,
            noise: 0.3,
            splits: [0.4, 0.1, 0.5],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("classes", self.classes),
            ("samples_per_class", self.samples_per_class),
            ("bag_grid", self.bag_grid),
            ("word_grid", self.word_grid),
            ("word_px", self.word_px),
            ("channels", self.channels),
        ];
        for (key, v) in pos {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        for (key, v) in [("bag_density", self.bag_density), ("word_density", self.word_density)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(key, "must lie in (0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be finite and non-negative"));
        }
        if self.splits.iter().any(|&f| f < 0.0) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("splits", "fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Pixel geometry. `d` is carried along for the model config to override.
    pub fn tiling(&self) -> TilingConfig {
        TilingConfig {
            n: self.bag_grid * self.bag_grid,
            m: self.word_grid * self.word_grid,
            bag_px: self.word_grid * self.word_px,
            word_px: self.word_px,
            d: TilingConfig::default().d,
        }
    }

    pub fn motif_bags(&self) -> usize {
        let n = self.bag_grid * self.bag_grid;
        ((self.bag_density * n as f64).round() as usize).clamp(1, n)
    }

    pub fn motif_words(&self) -> usize {
        let m = self.word_grid * self.word_grid;
        ((self.word_density * m as f64).round() as usize).clamp(1, m)
    }

    /// `(train, val, test)` counts per class.
    pub fn split_counts(&self) -> [usize; 3] {
        let k = self.samples_per_class;
        let train = ((self.splits[0] * k as f64).round() as usize).min(k);
        let val = ((self.splits[1] * k as f64).round() as usize).min(k - train);
        [train, val, k - train - val]
    }
}

/// Motif value in `{-1, 0, 1}` at pixel `(x, y)` with phase `(px, py)`.
pub fn motif(class: usize, x: usize, y: usize, phase: (usize, usize)) -> f32 {
    let period = 4 + 2 * (class / 4);
    let half = period / 2;
    let (u, v) = (x + phase.0, y + phase.1);
    let sign = |b: bool| if b { 1.0 } else { -1.0 };
    match class % 4 {
        0 => sign((v / half) % 2 == 0),
        1 => sign((u / half) % 2 == 0),
        2 => sign(((u / half) + (v / half)) % 2 == 0),
        _ => {
            if u % period < 2 && v % period < 2 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Noise-free motif word for `class` at zero phase.
pub fn template(spec: &SyntheticSpec, class: usize) -> Vec<f32> {
    let p = spec.word_px;
    let mut out = Vec::with_capacity(p * p * spec.channels);
    for y in 0..p {
        for x in 0..p {
            let v = BACKGROUND + spec.contrast as f32 * motif(class, x, y, (0, 0));
            out.extend(std::iter::repeat_n(v, spec.channels));
        }
    }
    out
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tiling = spec.tiling();
    let (n, m, p, c) = (tiling.n, tiling.m, spec.word_px, spec.channels);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config("noise", e.to_string()))?;
    let counts = spec.split_counts();
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for class in 0..spec.classes {
        for k in 0..spec.samples_per_class {
            let split = if k < counts[0] {
                Split::Train
            } else if k < counts[0] + counts[1] {
                Split::Val
            } else {
                Split::Test
            };
            let mut bag_mask = vec![false; n];
            let mut word_mask = vec![false; n * m];
            for b in sample_indices(&mut rng, n, spec.motif_bags()) {
                bag_mask[b] = true;
                for w in sample_indices(&mut rng, m, spec.motif_words()) {
                    word_mask[b * m + w] = true;
                }
            }
            let mut data = Vec::with_capacity(n * m * p * p * c);
            for &planted in &word_mask {
                let phase = (rng.random_range(0..p), rng.random_range(0..p));
                for y in 0..p {
                    for x in 0..p {
                        let base = if planted {
                            BACKGROUND + spec.contrast as f32 * motif(class, x, y, phase)
                        } else {
                            BACKGROUND
                        };
                        for _ in 0..c {
                            let e = if spec.noise > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                            data.push(base + e);
                        }
                    }
                }
            }
            let words = Tensor::new(vec![n, m, p, p, c], data)?;
            samples.push(Sample {
                id: format!("c{class}_{k:04}"),
                label: class,
                split,
                data: SampleData::Words(TiledImage::from_words(words, tiling)?),
                bag_mask: Some(bag_mask),
                word_mask: Some(word_mask),
            });
        }
    }
    Ok(Dataset {
        tiling,
        classes: spec.classes,
        samples,
        generator: serde_json::to_value(spec)?,
    })
}

/// Nearest-template label: compares every non-background word against the
/// class templates under all phase shifts.
pub fn template_label(spec: &SyntheticSpec, tiled: &TiledImage) -> Option<usize> {
    let p = spec.word_px;
    let mut best: Option<(f64, usize)> = None;
    for bag in 0..tiled.tiling.n {
        for word in 0..tiled.tiling.m {
            let img = tiled.word(bag, word);
            if img.data.iter().all(|&v| (v - BACKGROUND).abs() < 1e-6) {
                continue;
            }
            for class in 0..spec.classes {
                let period = 4 + 2 * (class / 4);
                for py in 0..period {
                    for px in 0..period {
                        let mut err = 0.0;
                        for y in 0..p {
                            for x in 0..p {
                                let t = BACKGROUND + spec.contrast as f32 * motif(class, x, y, (px, py));
                                err += ((img.get(x, y, 0) - t) as f64).powi(2);
                            }
                        }
                        if best.is_none_or(|(e, _)| err < e) {
                            best = Some((err, class));
                        }
                    }
                }
            }
        }
    }
    best.map(|(_, c)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            samples_per_class: 3,
            bag_grid: 2,
            word_grid: 2,
            word_px: 8,
            noise,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn counts_and_masks_are_exact() {
        let spec = SyntheticSpec { samples_per_class: 10, ..small(0.1) };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.samples.len(), 40);
        for class in 0..4 {
            assert_eq!(ds.samples.iter().filter(|s| s.label == class).count(), 10);
        }
        for s in &ds.samples {
            let bags = s.bag_mask.as_ref().unwrap();
            let words = s.word_mask.as_ref().unwrap();
            assert_eq!(bags.iter().filter(|&&b| b).count(), spec.motif_bags());
            assert_eq!(words.iter().filter(|&&w| w).count(), spec.motif_bags() * spec.motif_words());
            for (i, &w) in words.iter().enumerate() {
                assert!(!w || bags[i / 4]);
            }
        }
        assert_eq!(spec.split_counts(), [4, 1, 5]);
    }

    #[test]
    fn full_density_marks_everything() {
        let spec = SyntheticSpec { bag_density: 1.0, word_density: 1.0, ..small(0.0) };
        let ds = generate(&spec).unwrap();
        for s in &ds.samples {
            assert!(s.bag_mask.as_ref().unwrap().iter().all(|&b| b));
            assert!(s.word_mask.as_ref().unwrap().iter().all(|&b| b));
        }
    }

    #[test]
    fn noise_free_labels_are_recoverable_by_template_matching() {
        let spec = SyntheticSpec { classes: 6, ..small(0.0) };
        let ds = generate(&spec).unwrap();
        for s in &ds.samples {
            let SampleData::Words(t) = &s.data else { unreachable!() };
            assert_eq!(template_label(&spec, t), Some(s.label));
        }
    }

    #[test]
    fn motifs_are_distinct() {
        let spec = SyntheticSpec { classes: 8, ..small(0.0) };
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(template(&spec, a), template(&spec, b));
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&small(0.2)).unwrap();
        let b = generate(&small(0.2)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SyntheticSpec { seed: 1, ..small(0.2) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SyntheticSpec { classes: 1, ..small(0.0) }.validate().is_err());
        assert!(SyntheticSpec { bag_density: 0.0, ..small(0.0) }.validate().is_err());
        assert!(SyntheticSpec { splits: [0.5, 0.5, 0.5], ..small(0.0) }.validate().is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let ds = generate(&small(0.1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
