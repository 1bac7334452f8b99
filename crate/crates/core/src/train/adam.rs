use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real};

/// ADAM with bias correction. Moments are kept in f64 per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradient buffers of `params`. Parameters without
    /// a gradient buffer are treated as having zero gradient.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::shape("adam moments", &[m.len()], p.dims()));
            }
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|v| v.to_f64()).collect(),
                None => vec![0.0; n],
            };
            let data = p.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                if update != 0.0 {
                    data[i] = T::from_f64(data[i].to_f64() - update);
                }
            }
        }
        Ok(())
    }
}
