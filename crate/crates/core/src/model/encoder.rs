use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Var};

/// Where word features come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Trainable patch encoder on raw word pixels.
    Toy,
    /// Word features are supplied as an `n x m x d` tensor.
    Precomputed,
}

/// Two strided patch stages (4x4 then 2x2, ReLU after each), a global mean
/// pool, a linear projection to `d` and a parameter-free standardisation of
/// each feature row. Word side must be a multiple of 8.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub word_px: usize,
    pub channels: usize,
    pub d: usize,
    stage1: Linear,
    stage2: Linear,
    project: Linear,
}

impl ToyEncoder {
    pub const STAGE1_PATCH: usize = 4;
    pub const STAGE2_PATCH: usize = 2;
    pub const STAGE1_WIDTH: usize = 8;
    pub const STAGE2_WIDTH: usize = 16;
    pub const OUTPUT_NORM_EPS: f64 = 1e-5;

    pub fn new(word_px: usize, channels: usize, d: usize) -> Result<Self> {
        let stride = Self::STAGE1_PATCH * Self::STAGE2_PATCH;
        if word_px == 0 || word_px % stride != 0 {
            return Err(Error::config(
                "word_px",
                format!("toy encoder needs a word side divisible by {stride}, got {word_px}"),
            ));
        }
        if channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        let p1 = Self::STAGE1_PATCH * Self::STAGE1_PATCH * channels;
        let p2 = Self::STAGE2_PATCH * Self::STAGE2_PATCH * Self::STAGE1_WIDTH;
        Ok(Self {
            word_px,
            channels,
            d,
            stage1: Linear::new("encoder.stage1", p1, Self::STAGE1_WIDTH, true),
            stage2: Linear::new("encoder.stage2", p2, Self::STAGE2_WIDTH, true),
            project: Linear::new("encoder.project", Self::STAGE2_WIDTH, d, true),
        })
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.stage1.init(store, rng);
        self.stage2.init(store, rng);
        self.project.init(store, rng);
    }

    /// `words` is `[N, P, P, c]`; returns `[N, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, words: Var) -> Result<Var> {
        let dims = g.dims(words).to_vec();
        let expected = [self.word_px, self.word_px, self.channels];
        if dims.len() != 4 || dims[1..] != expected {
            return Err(Error::shape("toy encoder input", &dims, &expected));
        }
        let count = dims[0];
        let side1 = self.word_px / Self::STAGE1_PATCH;
        let side2 = side1 / Self::STAGE2_PATCH;

        let p = g.patchify(words, Self::STAGE1_PATCH)?;
        let h = self.stage1.forward(g, store, p)?;
        let h = g.relu(h);
        let h = g.reshape(h, &[count, side1, side1, Self::STAGE1_WIDTH])?;

        let p = g.patchify(h, Self::STAGE2_PATCH)?;
        let h = self.stage2.forward(g, store, p)?;
        let h = g.relu(h);
        let pooled = g.group_mean_rows(h, side2 * side2)?;
        let out = self.project.forward(g, store, pooled)?;
        Ok(g.layer_norm_rows(out, Self::OUTPUT_NORM_EPS))
    }
}
