//! Hierarchical word -> bag -> image attention network.
//!
//! Data flow for one image with `n` bags of `m` words:
//!
//! ```text
//! words --encoder--> B_cnn [n*m, d]
//!   B_w2w   = unit_w2w(B_cnn) per bag
//!   bar_B   = aggregate(B_w2w, w2b.self)     [n, d]   word coefficients kept
//!   hat_B   = aggregate(B_cnn, w2b.cnn)      [n, d]
//!   hat_b2b = mha_b2b_self(hat_B)
//!   B_b2b   = unit_b2b_cross(q = hat_b2b, kv = bar_B)
//!   I       = aggregate(B_b2b, b2i)          [d]      bag coefficients kept
//!   y       = softmax(I cls)
//! ```

pub mod checkpoint;
pub mod encoder;
pub mod image;
pub mod tiling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_uniform, AttentionTrace, Linear, TransformerUnit};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, RowReduce, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile};
pub use encoder::{EncoderKind, ToyEncoder};
pub use image::Image;
pub use tiling::{tile_image, Rect, TiledImage, TilingConfig};

pub const W2B_SELF: &str = "w2b.self";
pub const W2B_CNN: &str = "w2b.cnn";
pub const B2I: &str = "b2i";
pub const CLS: &str = "cls";

/// Row score used before the aggregation softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiKind {
    Euclidean,
    Manhattan,
    Mean,
}

impl PsiKind {
    pub const ALL: [PsiKind; 3] = [PsiKind::Euclidean, PsiKind::Manhattan, PsiKind::Mean];

    pub fn reduce(self) -> RowReduce {
        match self {
            PsiKind::Euclidean => RowReduce::L2,
            PsiKind::Manhattan => RowReduce::L1,
            PsiKind::Mean => RowReduce::Mean,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PsiKind::Euclidean => "euclidean",
            PsiKind::Manhattan => "manhattan",
            PsiKind::Mean => "mean",
        }
    }
}

impl std::str::FromStr for PsiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(PsiKind::Euclidean),
            "manhattan" => Ok(PsiKind::Manhattan),
            "mean" => Ok(PsiKind::Mean),
            other => Err(Error::config(
                "psi",
                format!("unknown psi `{other}`, expected euclidean, manhattan or mean"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tiling: TilingConfig,
    pub heads: usize,
    pub classes: usize,
    pub psi: PsiKind,
    pub encoder: EncoderKind,
    /// Pixel channels for the toy encoder.
    pub channels: usize,
    /// Pre-norm residual wiring around attention and FFN sub-layers.
    pub residual_norm: bool,
    /// Bias vectors on the attention and FFN projections.
    pub bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tiling: TilingConfig::default(),
            heads: 4,
            classes: 4,
            psi: PsiKind::Euclidean,
            encoder: EncoderKind::Toy,
            channels: 3,
            residual_norm: false,
            bias: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tiling.validate()?;
        if self.heads == 0 || self.tiling.d % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("d = {} is not divisible by heads = {}", self.tiling.d, self.heads),
            ));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if self.encoder == EncoderKind::Toy {
            ToyEncoder::new(self.tiling.word_px, self.channels, self.tiling.d)?;
        }
        Ok(())
    }
}

/// Model input: raw word pixels (toy encoder) or precomputed word features.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Words(&'a TiledImage),
    /// `[n, m, d]`.
    Features(&'a Tensor<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub class: usize,
}

impl Prediction {
    fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();
        let class = argmax(&probs);
        Self { logits, probs, class }
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Aggregation coefficients from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `[n, m]`, softmax over the words of each bag on the self-attention branch.
    pub word_coeffs: Tensor<f64>,
    /// `[n]`, softmax over bags.
    pub bag_coeffs: Tensor<f64>,
    /// Per-head attention weights, only when inspection was requested.
    pub stages: Option<AttentionTrace<f64>>,
}

impl AttentionRecord {
    pub fn n(&self) -> usize {
        self.word_coeffs.dims()[0]
    }

    pub fn m(&self) -> usize {
        self.word_coeffs.dims()[1]
    }
}

/// Number of entries kept by a top-`k_percent` selection over `len` items.
pub fn top_k_count(len: usize, k_percent: f64) -> Result<usize> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::config("top_k", format!("k must lie in (0, 100], got {k_percent}")));
    }
    // guard against 30% of 10 evaluating to 3.0000000000000004
    let raw = k_percent * len as f64 / 100.0;
    Ok(((raw - 1e-9).ceil() as usize).clamp(1, len))
}

/// Indices of the `count` largest values, largest first, ties to the lower index.
pub fn rank_desc(values: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

pub fn top_k_bags(rec: &AttentionRecord, k_percent: f64) -> Result<Vec<usize>> {
    let values = rec.bag_coeffs.data();
    Ok(rank_desc(values, top_k_count(values.len(), k_percent)?))
}

/// Global ranking of all `n*m` word coefficients; returns `(bag, word)` pairs.
pub fn top_k_words(rec: &AttentionRecord, k_percent: f64) -> Result<Vec<(usize, usize)>> {
    let values = rec.word_coeffs.data();
    let m = rec.m();
    Ok(rank_desc(values, top_k_count(values.len(), k_percent)?)
        .into_iter()
        .map(|i| (i / m, i % m))
        .collect())
}

/// Per-row Psi score; `x` is `[rows, d]`, result is `[rows]`.
pub fn psi<T: Real>(g: &mut Graph<T>, x: Var, kind: PsiKind) -> Var {
    g.row_reduce(x, kind.reduce())
}

/// Softmax-weighted combination inside consecutive groups of rows.
///
/// `x` is `[groups * size, d]` and `beta` is `[size, size]`. For group `i`,
/// `coeffs_i = softmax(psi(X_i) beta)` and `out_i = coeffs_i X_i`.
/// Returns `(out [groups, d], coeffs [groups, size])`.
pub fn aggregate<T: Real>(g: &mut Graph<T>, x: Var, beta: Var, groups: usize, kind: PsiKind) -> Result<(Var, Var)> {
    let xd = g.dims(x).to_vec();
    let bd = g.dims(beta).to_vec();
    if xd.len() != 2 || groups == 0 || xd[0] % groups != 0 {
        return Err(Error::shape("aggregate input", &xd, &[groups]));
    }
    let size = xd[0] / groups;
    if bd != [size, size] {
        return Err(Error::shape("aggregate beta", &bd, &[size, size]));
    }
    let scores = psi(g, x, kind);
    let scores = g.reshape(scores, &[groups, size])?;
    let logits = g.matmul(scores, beta)?;
    let coeffs = g.softmax_rows(logits);
    if groups == 1 {
        return Ok((g.matmul(coeffs, x)?, coeffs));
    }
    let mut rows = Vec::with_capacity(groups);
    for i in 0..groups {
        let c = g.slice_rows(coeffs, i, 1)?;
        let xi = g.slice_rows(x, i * size, size)?;
        rows.push(g.matmul(c, xi)?);
    }
    Ok((g.concat_rows(&rows)?, coeffs))
}

/// Graph handles produced by [`Hatnet::build`].
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[1, C]`.
    pub logits: Var,
    /// `[n, m]`.
    pub word_coeffs: Var,
    /// `[1, n]`.
    pub bag_coeffs: Var,
}

/// Architecture definition. Weights live in a separate [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Hatnet {
    pub config: ModelConfig,
    encoder: Option<ToyEncoder>,
    w2w: TransformerUnit,
    b2b_self: TransformerUnit,
    b2b_cross: TransformerUnit,
    cls: Linear,
}

impl Hatnet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            tiling,
            heads,
            bias,
            residual_norm,
            ..
        } = config;
        let d = tiling.d;
        let encoder = match config.encoder {
            EncoderKind::Toy => Some(ToyEncoder::new(tiling.word_px, config.channels, d)?),
            EncoderKind::Precomputed => None,
        };
        Ok(Self {
            encoder,
            w2w: TransformerUnit::new("w2w", d, heads, true, bias, residual_norm)?,
            b2b_self: TransformerUnit::new("b2b.self", d, heads, false, bias, residual_norm)?,
            b2b_cross: TransformerUnit::new("b2b.cross", d, heads, true, bias, residual_norm)?,
            cls: Linear::new(CLS, d, config.classes, false),
            config,
        })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let TilingConfig { n, m, .. } = self.config.tiling;
        if let Some(enc) = &self.encoder {
            enc.init(&mut store, &mut rng);
        }
        self.w2w.init(&mut store, &mut rng);
        store.insert(W2B_SELF, init_uniform(&mut rng, m, m));
        store.insert(W2B_CNN, init_uniform(&mut rng, m, m));
        self.b2b_self.init(&mut store, &mut rng);
        self.b2b_cross.init(&mut store, &mut rng);
        store.insert(B2I, init_uniform(&mut rng, n, n));
        self.cls.init(&mut store, &mut rng);
        store
    }

    /// Word features `[n*m, d]` on the tape.
    pub fn encode_words<T: Real>(&self, g: &mut Graph<T>, params: &ParamStore<T>, input: Input<'_>) -> Result<Var> {
        let TilingConfig { n, m, d, .. } = self.config.tiling;
        let raw = match input {
            Input::Features(f) => f.data(),
            Input::Words(img) => img.words.data(),
        };
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input entry {i} is {}", raw[i])));
        }
        match (input, &self.encoder) {
            (Input::Features(f), None) => {
                if f.dims() != [n, m, d] {
                    return Err(Error::shape("word features", f.dims(), &[n, m, d]));
                }
                let x = g.constant(f.cast::<T>());
                g.reshape(x, &[n * m, d])
            }
            (Input::Words(img), Some(enc)) => {
                let wd = img.words.dims();
                if wd[0] != n || wd[1] != m {
                    return Err(Error::shape("tiled words", wd, &[n, m]));
                }
                let x = g.constant(img.words.cast::<T>());
                let x = g.reshape(x, &[n * m, wd[2], wd[3], wd[4]])?;
                enc.forward(g, params, x)
            }
            (Input::Features(_), Some(_)) => Err(Error::Contract(
                "model uses the toy encoder but received precomputed features".into(),
            )),
            (Input::Words(_), None) => Err(Error::Contract(
                "model expects precomputed features but received word pixels".into(),
            )),
        }
    }

    /// Per-bag self-attention over `[n*m, d]` word features with shared weights.
    pub fn word_to_word<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        b_cnn: Var,
        trace: Option<&mut AttentionTrace<T>>,
    ) -> Result<Var> {
        let m = self.config.tiling.m;
        self.w2w.forward_blocks(g, params, b_cnn, b_cnn, b_cnn, m, m, trace)
    }

    /// Places the full pipeline on `g`.
    pub fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        input: Input<'_>,
        mut trace: Option<&mut AttentionTrace<T>>,
    ) -> Result<Outputs> {
        let n = self.config.tiling.n;
        let psi_kind = self.config.psi;
        let b_cnn = self.encode_words(g, params, input)?;
        let b_w2w = self.word_to_word(g, params, b_cnn, trace.as_deref_mut())?;

        let beta_bar = params.bind(g, W2B_SELF)?;
        let (bar, word_coeffs) = aggregate(g, b_w2w, beta_bar, n, psi_kind)?;
        let beta_hat = params.bind(g, W2B_CNN)?;
        let (hat, _) = aggregate(g, b_cnn, beta_hat, n, psi_kind)?;

        let hat_b2b = self.b2b_self.forward(g, params, hat, hat, hat, trace.as_deref_mut())?;
        let b_b2b = self.b2b_cross.forward(g, params, hat_b2b, bar, bar, trace.as_deref_mut())?;

        let beta_b2i = params.bind(g, B2I)?;
        let (image, bag_coeffs) = aggregate(g, b_b2b, beta_b2i, 1, psi_kind)?;
        let logits = self.cls.forward(g, params, image)?;
        Ok(Outputs {
            logits,
            word_coeffs,
            bag_coeffs,
        })
    }

    fn collect<T: Real>(&self, g: &Graph<T>, out: &Outputs, stages: Option<AttentionTrace<T>>) -> Result<(Prediction, AttentionRecord)> {
        let n = self.config.tiling.n;
        let logits = g.value(out.logits).to_f64_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits {logits:?}")));
        }
        let record = AttentionRecord {
            word_coeffs: g.value(out.word_coeffs).cast(),
            bag_coeffs: g.value(out.bag_coeffs).cast::<f64>().reshape(&[n])?,
            stages: stages.map(|t| AttentionTrace {
                entries: t.entries.into_iter().map(|(s, h, b, w)| (s, h, b, w.cast())).collect(),
            }),
        };
        Ok((Prediction::from_logits(logits), record))
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, input: Input<'_>) -> Result<(Prediction, AttentionRecord)> {
        let mut g = Graph::inference();
        let out = self.build(&mut g, params, input, None)?;
        self.collect(&g, &out, None)
    }

    /// Like [`Hatnet::forward`] but also keeps every per-head attention matrix.
    pub fn forward_inspect<T: Real>(&self, params: &ParamStore<T>, input: Input<'_>) -> Result<(Prediction, AttentionRecord)> {
        let mut g = Graph::inference();
        let mut trace = AttentionTrace::default();
        let out = self.build(&mut g, params, input, Some(&mut trace))?;
        self.collect(&g, &out, Some(trace))
    }

    /// Cross-entropy of one labelled sample without gradients.
    pub fn loss<T: Real>(&self, params: &ParamStore<T>, input: Input<'_>, label: usize) -> Result<f64> {
        let mut g = Graph::inference();
        let out = self.build(&mut g, params, input, None)?;
        let loss = g.cross_entropy_logits(out.logits, label)?;
        Ok(g.value(loss).data()[0].to_f64())
    }

    /// Forward + backward of one labelled sample. Gradients are added into
    /// the parameter buffers (callers zero them between updates).
    pub fn accumulate_gradients<T: Real>(
        &self,
        params: &mut ParamStore<T>,
        input: Input<'_>,
        label: usize,
    ) -> Result<(f64, Prediction)> {
        let mut g = Graph::new();
        let out = self.build(&mut g, params, input, None)?;
        let loss_var = g.cross_entropy_logits(out.logits, label)?;
        let loss = g.value(loss_var).data()[0].to_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss}")));
        }
        g.backward(loss_var)?;
        params.accumulate_grads(&g)?;
        let prediction = Prediction::from_logits(g.value(out.logits).to_f64_vec());
        Ok((loss, prediction))
    }
}
