//! Transformer unit: multi-head attention followed by a two-layer FFN.
//!
//! Layers hold only names and sizes; the weights live in a [`ParamStore`] so
//! that checkpoints and averaging can address every matrix by name.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_f64(vec![fan_in, fan_out], &data).expect("positive dims")
}

/// Bias-free (by default) dense layer `x W (+ b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
            bias,
        }
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(self.name.clone(), init_uniform(rng, self.fan_in, self.fan_out));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.fan_out]));
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, &self.name)?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = store.bind(g, &self.bias_name())?;
            g.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}

/// `softmax(Q K^T / sqrt(d_h)) V`. Returns the output and the weight matrix.
pub fn scaled_dot_product<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let (dq, dk, dv) = (g.dims(q).to_vec(), g.dims(k).to_vec(), g.dims(v).to_vec());
    if dq.len() != 2 || dk.len() != 2 || dq[1] != dk[1] {
        return Err(Error::shape("scaled_dot_product(q, k)", &dq, &dk));
    }
    if dv.len() != 2 || dv[0] != dk[0] {
        return Err(Error::shape("scaled_dot_product(k, v)", &dk, &dv));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (dq[1] as f64).sqrt());
    let weights = g.softmax_rows(scaled);
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Attention weights captured during an inspected forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace<T: Real = f32> {
    /// `(stage label, head, block, weights[N_q x N_k])`.
    pub entries: Vec<(String, usize, usize, Tensor<T>)>,
}

impl<T: Real> AttentionTrace<T> {
    pub fn stage(&self, label: &str) -> impl Iterator<Item = &(String, usize, usize, Tensor<T>)> {
        let label = label.to_string();
        self.entries.iter().filter(move |e| e.0 == label)
    }
}

/// Multi-head attention: `Concat(head_1..head_H) beta_mha`, with
/// `head_i = A(X_Q beta_Q^i, X_K beta_K^i, X_V beta_V^i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHead {
    pub prefix: String,
    pub d: usize,
    pub heads: usize,
    query: Vec<Linear>,
    key: Vec<Linear>,
    value: Vec<Linear>,
    fusion: Linear,
}

impl MultiHead {
    pub fn new(prefix: impl Into<String>, d: usize, heads: usize, bias: bool) -> Result<Self> {
        let prefix = prefix.into();
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("model dim {d} is not divisible by head count {heads}"),
            ));
        }
        let dh = d / heads;
        let branch = |tag: &str| -> Vec<Linear> {
            (0..heads)
                .map(|i| Linear::new(format!("{prefix}.{tag}.{i}"), d, dh, bias))
                .collect()
        };
        Ok(Self {
            query: branch("query"),
            key: branch("key"),
            value: branch("value"),
            fusion: Linear::new(format!("{prefix}.fusion"), d, d, bias),
            prefix,
            d,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in self.query.iter().chain(&self.key).chain(&self.value) {
            l.init(store, rng);
        }
        self.fusion.init(store, rng);
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: Var,
        xk: Var,
        xv: Var,
        trace: Option<&mut AttentionTrace<T>>,
    ) -> Result<Var> {
        let nq = g.dims(xq)[0];
        let nk = g.dims(xk)[0];
        self.forward_blocks(g, store, xq, xk, xv, nq, nk, trace)
    }

    /// Block-diagonal variant: rows are split into consecutive blocks of
    /// `q_block` queries and `k_block` keys, and block `b` of the queries only
    /// attends to block `b` of the keys. Projections are shared, so this is
    /// the same as running [`MultiHead::forward`] on each block separately.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_blocks<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: Var,
        xk: Var,
        xv: Var,
        q_block: usize,
        k_block: usize,
        mut trace: Option<&mut AttentionTrace<T>>,
    ) -> Result<Var> {
        for x in [xq, xk, xv] {
            let d = g.dims(x);
            if d.len() != 2 || d[1] != self.d {
                return Err(Error::shape("multi_head input", d, &[self.d]));
            }
        }
        let (nq, nk) = (g.dims(xq)[0], g.dims(xk)[0]);
        if g.dims(xv)[0] != nk {
            return Err(Error::shape("multi_head(keys, values)", g.dims(xk), g.dims(xv)));
        }
        if q_block == 0 || k_block == 0 || nq % q_block != 0 || nk % k_block != 0 || nq / q_block != nk / k_block {
            return Err(Error::shape("multi_head blocks", &[nq, nk], &[q_block, k_block]));
        }
        let blocks = nq / q_block;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = self.query[h].forward(g, store, xq)?;
            let k = self.key[h].forward(g, store, xk)?;
            let v = self.value[h].forward(g, store, xv)?;
            if blocks == 1 {
                let (out, w) = scaled_dot_product(g, q, k, v)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.entries.push((self.prefix.clone(), h, 0, g.value(w).clone()));
                }
                heads.push(out);
                continue;
            }
            let mut outs = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let qb = g.slice_rows(q, b * q_block, q_block)?;
                let kb = g.slice_rows(k, b * k_block, k_block)?;
                let vb = g.slice_rows(v, b * k_block, k_block)?;
                let (out, w) = scaled_dot_product(g, qb, kb, vb)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.entries.push((self.prefix.clone(), h, b, g.value(w).clone()));
                }
                outs.push(out);
            }
            heads.push(g.concat_rows(&outs)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.fusion.forward(g, store, cat)
    }
}

/// `ReLU(X beta_E) beta_R` with a fixed 4x expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    expand: Linear,
    reduce: Linear,
}

impl Ffn {
    pub const EXPANSION: usize = 4;

    pub fn new(prefix: &str, d: usize, bias: bool) -> Self {
        Self {
            expand: Linear::new(format!("{prefix}.expand"), d, Self::EXPANSION * d, bias),
            reduce: Linear::new(format!("{prefix}.reduce"), Self::EXPANSION * d, d, bias),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.expand.init(store, rng);
        self.reduce.init(store, rng);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = g.dims(x);
        if d.len() != 2 || d[1] != self.expand.fan_in {
            return Err(Error::shape("ffn input", d, &[self.expand.fan_in]));
        }
        let h = self.expand.forward(g, store, x)?;
        let h = g.relu(h);
        self.reduce.forward(g, store, h)
    }
}

/// Learned per-feature gain and shift after row normalisation.
#[derive(Clone, Debug, PartialEq)]
struct Norm {
    name: String,
    d: usize,
}

impl Norm {
    fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.gain", self.name), Tensor::full(&[self.d], T::ONE));
        store.insert(format!("{}.shift", self.name), Tensor::zeros(&[self.d]));
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = store.bind(g, &format!("{}.gain", self.name))?;
        let shift = store.bind(g, &format!("{}.shift", self.name))?;
        let n = g.layer_norm_rows(x, NORM_EPS);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }
}

/// Multi-head attention, optionally followed by an FFN.
///
/// Without `residual_norm` this is the plain composition `FFN(MultiHead(..))`.
/// With it, both sub-layers are wrapped pre-norm style:
/// `h = X_Q + MultiHead(LN(X_Q), LN(X_K), LN(X_V))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerUnit {
    pub mha: MultiHead,
    pub ffn: Option<Ffn>,
    residual_norm: Option<(Norm, Norm)>,
}

impl TransformerUnit {
    pub fn new(prefix: &str, d: usize, heads: usize, with_ffn: bool, bias: bool, residual_norm: bool) -> Result<Self> {
        Ok(Self {
            mha: MultiHead::new(format!("{prefix}.mha"), d, heads, bias)?,
            ffn: with_ffn.then(|| Ffn::new(&format!("{prefix}.ffn"), d, bias)),
            residual_norm: residual_norm.then(|| {
                (
                    Norm {
                        name: format!("{prefix}.norm_attn"),
                        d,
                    },
                    Norm {
                        name: format!("{prefix}.norm_ffn"),
                        d,
                    },
                )
            }),
        })
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.mha.init(store, rng);
        if let Some(ffn) = &self.ffn {
            ffn.init(store, rng);
        }
        if let Some((a, f)) = &self.residual_norm {
            a.init(store);
            if self.ffn.is_some() {
                f.init(store);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_blocks<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: Var,
        xk: Var,
        xv: Var,
        q_block: usize,
        k_block: usize,
        trace: Option<&mut AttentionTrace<T>>,
    ) -> Result<Var> {
        match &self.residual_norm {
            None => {
                let h = self.mha.forward_blocks(g, store, xq, xk, xv, q_block, k_block, trace)?;
                match &self.ffn {
                    Some(ffn) => ffn.forward(g, store, h),
                    None => Ok(h),
                }
            }
            Some((norm_attn, norm_ffn)) => {
                let nq = norm_attn.forward(g, store, xq)?;
                let nk = if xk == xq { nq } else { norm_attn.forward(g, store, xk)? };
                let nv = if xv == xk { nk } else { norm_attn.forward(g, store, xv)? };
                let a = self.mha.forward_blocks(g, store, nq, nk, nv, q_block, k_block, trace)?;
                let h = g.add(xq, a)?;
                match &self.ffn {
                    Some(ffn) => {
                        let n = norm_ffn.forward(g, store, h)?;
                        let f = ffn.forward(g, store, n)?;
                        g.add(h, f)
                    }
                    None => Ok(h),
                }
            }
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: Var,
        xk: Var,
        xv: Var,
        trace: Option<&mut AttentionTrace<T>>,
    ) -> Result<Var> {
        let (nq, nk) = (g.dims(xq)[0], g.dims(xk)[0]);
        self.forward_blocks(g, store, xq, xk, xv, nq, nk, trace)
    }
}
