use rand::Rng;

use super::Tensor;
use crate::scalar::Scalar;

/// Glorot-uniform draw of the given shape.
pub fn xavier<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.gen_range(-a..a))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("sized")
}
