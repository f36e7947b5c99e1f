//! Reference CPU kernels for every layer kind.
//!
//! All kernels are pure functions of their inputs and single-threaded, so
//! repeated calls are bitwise reproducible.

mod conv;
mod misc;
mod norm;
mod pool;

pub use conv::{conv2d, conv_out_hw};
pub(crate) use conv::{geometry, gemm, im2col, ConvGeom};
#[cfg(test)]
pub(crate) use conv::conv_forward;
pub use misc::{concat_channels, inner_product, relu, softmax_channels, split_channels};
pub use norm::{batch_norm, lrn, scale};
pub use pool::{pool2d, pool_out_hw};
