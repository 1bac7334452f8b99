//! Central finite differences, used as an independent oracle for `backward`.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// `(f(x + eps) - f(x - eps)) / 2eps`, one element at a time.
///
/// The divisor is the realised step `(x + eps) - (x - eps)` in the storage
/// type, which matters for `f32`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<f64>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let hi = T::from_f64(orig.to_f64() + eps);
        let lo = T::from_f64(orig.to_f64() - eps);
        probe.data_mut()[i] = hi;
        let up = f(&probe);
        probe.data_mut()[i] = lo;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        // The actual step after rounding to the storage type.
        out.push((up - down) / (hi.to_f64() - lo.to_f64()));
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries whose true gradient is ~0 from dominating the
/// comparison with rounding noise.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradComparison {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn compare_grads(analytic: &[f64], numeric: &[f64], floor: f64) -> GradComparison {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths");
    let mut worst = GradComparison {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n, floor);
        if e > worst.max_rel_err {
            worst = GradComparison {
                max_rel_err: e,
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::from_f64(vec![2, 2], &[0.3, -1.0, 2.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| t.to_f64_vec().iter().sum(), &x, 1e-3).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f32>::scalar(3.0);
        let g = finite_diff_grad(|t| (t.data()[0] as f64).powi(2), &x, 1e-3).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-4, "{}", g.data()[0]);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
        assert!(finite_diff_grad(|_| 0.0, &x, f64::NAN).is_err());
    }
}
