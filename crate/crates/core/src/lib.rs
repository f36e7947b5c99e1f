//! Graph slimming for CNN inference.
//!
//! Non-tensor layers (batch-norm, scale, LRN, pooling) are folded or absorbed
//! into neighbouring convolutions, parallel branches are merged, and the
//! resulting slim layers are regenerated by feature-map regression against
//! the original sub-network. A per-layer profiler measures the effect.

pub mod fixtures;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod profile;
pub mod rng;
pub mod slim;
pub mod tensor;
pub mod train;

pub use graph::{Chw, LayerKind, LayerNode, ModelGraph};
pub use params::{BnParams, ConvParams, FcParams, LrnParams, PoolMode, PoolParams, ScaleParams};
pub use tensor::{Hw, ShapeError, Tensor4};
