//! Re-indexing the input channels of layers that read a rewritten concat.

use super::{ChannelMap, SlimError};
use crate::graph::{LayerKind, ModelGraph};
use crate::params::{ConvParams, FcParams};
use crate::tensor::Tensor4;

pub(crate) fn is_identity(map: &ChannelMap, old_channels: usize) -> bool {
    map.len() == old_channels && map.iter().enumerate().all(|(i, m)| *m == Some(i))
}

fn remap_conv(p: &ConvParams, map: &ChannelMap) -> ConvParams {
    let k = p.kernel();
    let plane = k.h * k.w;
    let old_i = p.in_channels();
    let old = p.weights.data();
    let mut data = vec![0f32; p.out_channels() * map.len() * plane];
    for o in 0..p.out_channels() {
        for (j, src) in map.iter().enumerate() {
            if let Some(src) = src {
                let from = (o * old_i + src) * plane;
                let to = (o * map.len() + j) * plane;
                data[to..to + plane].copy_from_slice(&old[from..from + plane]);
            }
        }
    }
    ConvParams {
        weights: Tensor4::new(p.out_channels(), map.len(), k.h, k.w, data).expect("sized above"),
        bias: p.bias.clone(),
        stride: p.stride,
        pad: p.pad,
    }
}

fn remap_fc(p: &FcParams, map: &ChannelMap, old_channels: usize) -> Result<FcParams, SlimError> {
    if old_channels == 0 || p.in_features % old_channels != 0 {
        return Err(SlimError::Structure(format!(
            "inner product with {} inputs cannot be split into {old_channels} channels",
            p.in_features
        )));
    }
    let plane = p.in_features / old_channels;
    let in_features = map.len() * plane;
    let mut weights = vec![0f32; p.out_features * in_features];
    for o in 0..p.out_features {
        for (j, src) in map.iter().enumerate() {
            if let Some(src) = src {
                let from = o * p.in_features + src * plane;
                let to = o * in_features + j * plane;
                weights[to..to + plane].copy_from_slice(&p.weights[from..from + plane]);
            }
        }
    }
    Ok(FcParams {
        out_features: p.out_features,
        in_features,
        weights,
        bias: p.bias.clone(),
    })
}

/// After the channels produced by `source` changed from `old_channels` to the
/// order given by `map`, rewrites every convolution or inner product reading
/// them (directly or through ReLU, dropout or pooling) so the network
/// function is unchanged. Channels mapped to `None` get zero weights.
pub(crate) fn remap_consumers(
    g: &mut ModelGraph,
    source: &str,
    map: &ChannelMap,
    old_channels: usize,
) -> Result<(), SlimError> {
    if is_identity(map, old_channels) {
        return Ok(());
    }
    let mut stack = vec![source.to_string()];
    while let Some(id) = stack.pop() {
        if g.output_ids().contains(&id) {
            return Err(SlimError::Structure(format!(
                "reordered channels of '{source}' reach graph output '{id}'"
            )));
        }
        let readers: Vec<String> = g.consumers(&id).into_iter().map(String::from).collect();
        for r in readers {
            let node = g.node_mut(&r)?;
            match &mut node.kind {
                LayerKind::Relu | LayerKind::Dropout | LayerKind::Pool(_) => stack.push(r),
                LayerKind::Conv(p) => *p = remap_conv(p, map),
                LayerKind::InnerProduct(p) => *p = remap_fc(p, map, old_channels)?,
                other => {
                    return Err(SlimError::Structure(format!(
                        "reordered channels of '{source}' reach {} node '{r}'",
                        other.name()
                    )))
                }
            }
        }
    }
    Ok(())
}
