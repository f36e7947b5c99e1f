use std::collections::BTreeMap;

use super::{infer_shapes, Chw, GraphError, LayerKind, ModelGraph};

/// Analytic per-sample cost of every node.
///
/// Convolutions count multiply-accumulates `O*I*Kh*Kw*Ho*Wo`, inner products
/// `O*In`. Pooling counts one op per window tap, LRN one per window channel
/// per element, and the remaining element-wise layers one op per output
/// element. Input, Concat and Dropout are free.
pub fn count_flops(g: &ModelGraph, input: Chw) -> Result<BTreeMap<String, u64>, GraphError> {
    let shapes = infer_shapes(g, input)?;
    let mut out = BTreeMap::new();
    for node in g.nodes() {
        let s = shapes[&node.id];
        let elems = s.numel() as u64;
        let cost = match &node.kind {
            LayerKind::Conv(p) => {
                let k = p.kernel();
                (p.out_channels() * p.in_channels() * k.h * k.w * s.h * s.w) as u64
            }
            LayerKind::InnerProduct(p) => (p.out_features * p.in_features) as u64,
            LayerKind::Pool(p) => elems * p.kernel.product() as u64,
            LayerKind::Lrn(p) => elems * p.local_size as u64,
            LayerKind::BatchNorm(_) | LayerKind::Scale(_) | LayerKind::Relu | LayerKind::Softmax => elems,
            LayerKind::Input(_) | LayerKind::Concat | LayerKind::Dropout => 0,
        };
        out.insert(node.id.clone(), cost);
    }
    Ok(out)
}

pub fn total_flops(g: &ModelGraph) -> Result<u64, GraphError> {
    Ok(count_flops(g, g.input_shape()?)?.values().sum())
}
