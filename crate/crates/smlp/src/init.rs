//! Weight initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Truncated normal: N(0, std) resampled until |v| <= 2*std.
pub fn trunc_normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let cutoff = 2.0 * std;
    Tensor::from_fn(shape, |_| loop {
        let v = dist.sample(rng);
        if v.abs() <= cutoff {
            return cast(v);
        }
    })
}

/// Uniform samples in [lo, hi); used by probes that need strictly nonzero weights.
pub fn uniform<T: Scalar, R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new(lo, hi);
    Tensor::from_fn(shape, |_| cast(dist.sample(rng)))
}
