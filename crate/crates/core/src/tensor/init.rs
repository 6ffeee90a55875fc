use super::{Scalar, Tensor};
use crate::rng::Rng;

/// Half-width of the Xavier (Glorot) uniform range.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier-uniform initialized trainable tensor: values uniform on
/// `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<F: Scalar>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<F> {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    let b = xavier_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| F::from_f64(rng.uniform_in(-b, b))).collect();
    Tensor::new(shape, values).expect("positive dims").with_grad()
}
