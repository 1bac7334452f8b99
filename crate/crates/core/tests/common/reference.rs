//! Straight-line re-implementation of the forward pass with plain loops and
//! `Vec<Vec<f64>>`, reading weights by name. Shares no code with the tape.

use hatnet::model::{EncoderKind, ModelConfig, PsiKind};
use hatnet::tensor::{ParamStore, Real, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat<T: Real>(t: &Tensor<T>) -> Mat {
    let d = t.dims();
    let (r, c) = if d.len() == 1 { (1, d[0]) } else { (d[0], t.numel() / d[0]) };
    (0..r)
        .map(|i| (0..c).map(|j| t.data()[i * c + j].to_f64()).collect())
        .collect()
}

fn p<T: Real>(store: &ParamStore<T>, name: &str) -> Mat {
    mat(store.get(name).unwrap_or_else(|_| panic!("missing {name}")))
}

fn bias<T: Real>(store: &ParamStore<T>, name: &str) -> Option<Vec<f64>> {
    store.get(&format!("{name}.bias")).ok().map(|t| t.to_f64_vec())
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn linear<T: Real>(store: &ParamStore<T>, name: &str, x: &Mat) -> Mat {
    let mut y = matmul(x, &p(store, name));
    if let Some(b) = bias(store, name) {
        for row in &mut y {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
    }
    y
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let scale = (q[0].len() as f64).sqrt();
    let mut out = Vec::new();
    for qi in q {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale)
            .collect();
        let w = softmax(&scores);
        let mut row = vec![0.0; v[0].len()];
        for (wj, vj) in w.iter().zip(v) {
            for (r, x) in row.iter_mut().zip(vj) {
                *r += wj * x;
            }
        }
        out.push(row);
    }
    out
}

fn multi_head<T: Real>(store: &ParamStore<T>, prefix: &str, heads: usize, xq: &Mat, xk: &Mat, xv: &Mat) -> Mat {
    let mut cat = vec![Vec::new(); xq.len()];
    for h in 0..heads {
        let q = linear(store, &format!("{prefix}.mha.query.{h}"), xq);
        let k = linear(store, &format!("{prefix}.mha.key.{h}"), xk);
        let v = linear(store, &format!("{prefix}.mha.value.{h}"), xv);
        for (row, part) in cat.iter_mut().zip(attention(&q, &k, &v)) {
            row.extend(part);
        }
    }
    linear(store, &format!("{prefix}.mha.fusion"), &cat)
}

fn ffn<T: Real>(store: &ParamStore<T>, prefix: &str, x: &Mat) -> Mat {
    let h = relu(&linear(store, &format!("{prefix}.ffn.expand"), x));
    linear(store, &format!("{prefix}.ffn.reduce"), &h)
}

fn psi(kind: PsiKind, row: &[f64]) -> f64 {
    match kind {
        PsiKind::Euclidean => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
        PsiKind::Manhattan => row.iter().map(|v| v.abs()).sum(),
        PsiKind::Mean => row.iter().sum::<f64>() / row.len() as f64,
    }
}

/// Returns `(combined row, coefficients)`.
fn combine(kind: PsiKind, beta: &Mat, x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let s: Vec<f64> = x.iter().map(|r| psi(kind, r)).collect();
    let logits: Vec<f64> = (0..beta[0].len())
        .map(|j| (0..s.len()).map(|i| s[i] * beta[i][j]).sum())
        .collect();
    let c = softmax(&logits);
    let mut out = vec![0.0; x[0].len()];
    for (ci, row) in c.iter().zip(x) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += ci * v;
        }
    }
    (out, c)
}

/// One word `[P][P][c]` through the toy encoder.
fn encode_word<T: Real>(store: &ParamStore<T>, word: &[f64], px: usize, ch: usize) -> Vec<f64> {
    let s1 = px / 4;
    let mut stage1 = vec![vec![0.0; 8]; s1 * s1];
    let w1 = p(store, "encoder.stage1");
    let b1 = bias(store, "encoder.stage1").unwrap();
    for py in 0..s1 {
        for qx in 0..s1 {
            let mut patch = Vec::new();
            for ky in 0..4 {
                for kx in 0..4 {
                    for c in 0..ch {
                        patch.push(word[((py * 4 + ky) * px + qx * 4 + kx) * ch + c]);
                    }
                }
            }
            for o in 0..8 {
                let v: f64 = b1[o] + patch.iter().enumerate().map(|(i, x)| x * w1[i][o]).sum::<f64>();
                stage1[py * s1 + qx][o] = v.max(0.0);
            }
        }
    }
    let s2 = s1 / 2;
    let w2 = p(store, "encoder.stage2");
    let b2 = bias(store, "encoder.stage2").unwrap();
    let mut pooled = vec![0.0; 16];
    for py in 0..s2 {
        for qx in 0..s2 {
            let mut patch = Vec::new();
            for ky in 0..2 {
                for kx in 0..2 {
                    patch.extend(&stage1[(py * 2 + ky) * s1 + qx * 2 + kx]);
                }
            }
            for o in 0..16 {
                let v: f64 = b2[o] + patch.iter().enumerate().map(|(i, x)| x * w2[i][o]).sum::<f64>();
                pooled[o] += v.max(0.0) / (s2 * s2) as f64;
            }
        }
    }
    let out = linear(store, "encoder.project", &vec![pooled]).remove(0);
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64;
    out.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

pub struct Reference {
    pub probs: Vec<f64>,
    pub word_coeffs: Mat,
    pub bag_coeffs: Vec<f64>,
}

/// `input` is `[n, m, d]` features or `[n, m, P, P, c]` pixels, matching the encoder kind.
pub fn forward<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>, input: &Tensor<f32>) -> Reference {
    assert!(!cfg.residual_norm, "reference covers the plain wiring only");
    let (n, m, d, h) = (cfg.tiling.n, cfg.tiling.m, cfg.tiling.d, cfg.heads);
    let raw = input.to_f64_vec();
    let bags: Vec<Mat> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| match cfg.encoder {
                    EncoderKind::Precomputed => raw[(i * m + j) * d..(i * m + j + 1) * d].to_vec(),
                    EncoderKind::Toy => {
                        let (px, ch) = (cfg.tiling.word_px, cfg.channels);
                        let len = px * px * ch;
                        encode_word(store, &raw[(i * m + j) * len..(i * m + j + 1) * len], px, ch)
                    }
                })
                .collect()
        })
        .collect();

    let beta_bar = p(store, "w2b.self");
    let beta_hat = p(store, "w2b.cnn");
    let mut bar = Vec::new();
    let mut hat = Vec::new();
    let mut word_coeffs = Vec::new();
    for bag in &bags {
        let w2w = ffn(store, "w2w", &multi_head(store, "w2w", h, bag, bag, bag));
        let (row, c) = combine(cfg.psi, &beta_bar, &w2w);
        bar.push(row);
        word_coeffs.push(c);
        hat.push(combine(cfg.psi, &beta_hat, bag).0);
    }
    let hat_b2b = multi_head(store, "b2b.self", h, &hat, &hat, &hat);
    let b2b = ffn(store, "b2b.cross", &multi_head(store, "b2b.cross", h, &hat_b2b, &bar, &bar));
    let (image, bag_coeffs) = combine(cfg.psi, &p(store, "b2i"), &b2b);
    let logits = matmul(&vec![image], &p(store, "cls")).remove(0);
    Reference {
        probs: softmax(&logits),
        word_coeffs,
        bag_coeffs,
    }
}
