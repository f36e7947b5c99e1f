//! Xavier initialisation.

use rand::Rng;

use crate::params::ConvParams;
use crate::rng::seeded;
use crate::tensor::{Hw, Tensor4};

/// Bound `a = sqrt(6 / (fan_in + fan_out))` for an `O x I x Kh x Kw` filter
/// bank, with `fan_in = I*Kh*Kw` and `fan_out = O*Kh*Kw`.
pub fn xavier_bound(shape: [usize; 4]) -> f64 {
    let [o, i, kh, kw] = shape;
    (6.0 / ((i + o) * kh * kw) as f64).sqrt()
}

/// Weights drawn uniformly from `[-a, a]`, see [`xavier_bound`].
pub fn xavier_init(shape: [usize; 4], seed: u64) -> Tensor4 {
    let [o, i, kh, kw] = shape;
    let mut rng = seeded(seed);
    let a = xavier_bound(shape) as f32;
    Tensor4::from_fn(o, i, kh, kw, |_, _, _, _| rng.gen_range(-a..=a))
}

/// A conv with Xavier weights, zero bias and the given geometry.
pub fn xavier_conv(shape: [usize; 4], stride: Hw, pad: Hw, seed: u64) -> ConvParams {
    ConvParams {
        weights: xavier_init(shape, seed),
        bias: vec![0.0; shape[0]],
        stride,
        pad,
    }
}
