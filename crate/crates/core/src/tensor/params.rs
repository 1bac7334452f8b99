use std::collections::BTreeMap;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter table. Iteration order is the lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) {
        t.set_requires_grad(true);
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Places the named parameter on the tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }

    /// Adds the gradients of every bound parameter into the stored buffers.
    pub fn accumulate_grads(&mut self, g: &Graph<T>) -> Result<()> {
        for (name, grad) in g.param_grads() {
            if let Some(grad) = grad {
                self.get_mut(name)?.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn scale_grads(&mut self, c: f64) {
        for t in self.tensors.values_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v = T::from_f64(v.to_f64() * c));
            }
        }
    }

    /// Same names with the same dims.
    pub fn check_layout<U: Real>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Contract(format!(
                "parameter count differs: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b {
                return Err(Error::Contract(format!("parameter name `{a}` vs `{b}`")));
            }
            if ta.dims() != tb.dims() {
                return Err(Error::shape("param layout", ta.dims(), tb.dims()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Copy without gradient buffers.
    pub fn snapshot(&self) -> Self {
        let mut out = self.clone();
        out.tensors.values_mut().for_each(Tensor::clear_grad);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_accumulate() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = store.bind(&mut g, "w").unwrap();
            let s = g.sum(w);
            g.backward(s).unwrap();
            store.accumulate_grads(&g).unwrap();
        }
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 2.0]);
        store.scale_grads(0.5);
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[1.0, 1.0]);
        store.zero_grad();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[0.0, 0.0]);
        assert!(store.get("missing").is_err());
    }
}
