//! Vertical merges: LRN pruning and pooling absorption.

use super::{
    conv_of, ensure_valid, exclusive, sole_input, wrong_kind, PassKind, RetrainSpec, RewriteRecord, Segment,
    SlimError, TargetPiece,
};
use crate::graph::{infer_shapes, LayerKind, ModelGraph};
use crate::tensor::{out_extent, Hw};

/// Walks up from `from` through single-input nodes accepted by `pass_through`
/// to the nearest conv, checking that every activation on the way is read
/// only by the next node. Returns the conv id.
fn conv_above(g: &ModelGraph, from: &str, pass_through: impl Fn(&LayerKind) -> bool) -> Result<String, SlimError> {
    let mut below = from.to_string();
    let mut cur = sole_input(g, from)?.to_string();
    loop {
        exclusive(g, &cur, &below)?;
        let node = g.node(&cur)?;
        if node.kind.as_conv().is_some() {
            return Ok(cur);
        }
        if !pass_through(&node.kind) {
            return Err(SlimError::Structure(format!(
                "no convolution above '{from}': reached {} node '{cur}'",
                node.kind.name()
            )));
        }
        below = cur.clone();
        cur = sole_input(g, &cur)?.to_string();
    }
}

/// Removes an LRN layer. The nearest convolution above it becomes a slim
/// layer to be regenerated against the original output of the LRN.
pub fn prune_lrn(g: &ModelGraph, lrn_id: &str) -> Result<(ModelGraph, RewriteRecord), SlimError> {
    if !matches!(g.node(lrn_id)?.kind, LayerKind::Lrn(_)) {
        return Err(wrong_kind(g, lrn_id, "Lrn"));
    }
    let conv = conv_above(g, lrn_id, |k| {
        matches!(
            k,
            LayerKind::Relu
                | LayerKind::Dropout
                | LayerKind::Pool(_)
                | LayerKind::Lrn(_)
                | LayerKind::BatchNorm(_)
                | LayerKind::Scale(_)
        )
    })?;
    let input = sole_input(g, lrn_id)?.to_string();
    let mut out = g.clone();
    out.remove(lrn_id)?;
    out.rewire(lrn_id, &input);
    ensure_valid(&out)?;

    let mut rec = RewriteRecord::new(PassKind::PruneLrn, conv.clone(), Segment::new(conv.clone(), lrn_id));
    rec.removed_ids.push(lrn_id.to_string());
    rec.retrain.push(RetrainSpec {
        layer: conv,
        target: vec![TargetPiece::whole(lrn_id)],
    });
    Ok((out, rec))
}

fn absorbed_axis(input: usize, kernel: usize, stride: usize, pad: usize, target: usize) -> Option<usize> {
    std::iter::once(pad)
        .chain(0..kernel)
        .find(|&p| out_extent(input, kernel, stride, p) == Some(target))
}

/// Removes a pooling layer that follows `conv_id` (directly or through ReLU
/// or dropout, which stay after the slim layer). The conv's stride becomes
/// the product of both strides, with padding chosen so that its output keeps
/// the pooled shape.
pub fn absorb_pool(g: &ModelGraph, conv_id: &str, pool_id: &str) -> Result<(ModelGraph, RewriteRecord), SlimError> {
    let conv = conv_of(g, conv_id)?;
    let LayerKind::Pool(pool) = &g.node(pool_id)?.kind else {
        return Err(wrong_kind(g, pool_id, "Pool"));
    };
    let above = conv_above(g, pool_id, |k| matches!(k, LayerKind::Relu | LayerKind::Dropout));
    match above {
        Ok(c) if c == conv_id => {}
        Ok(_) | Err(SlimError::Structure(_)) => {
            return Err(SlimError::NotAdjacent {
                first: conv_id.into(),
                second: pool_id.into(),
            })
        }
        Err(e) => return Err(e),
    }

    let shapes = infer_shapes(g, g.input_shape()?)?;
    let incoming = shapes[sole_input(g, conv_id)?];
    let pooled = shapes[pool_id];
    let k = conv.kernel();
    let stride = Hw::new(conv.stride.h * pool.stride.h, conv.stride.w * pool.stride.w);
    let pad_h = absorbed_axis(incoming.h, k.h, stride.h, conv.pad.h, pooled.h);
    let pad_w = absorbed_axis(incoming.w, k.w, stride.w, conv.pad.w, pooled.w);
    let (Some(ph), Some(pw)) = (pad_h, pad_w) else {
        return Err(SlimError::ShapeIncompatible {
            conv: conv_id.into(),
            pool: pool_id.into(),
            detail: format!(
                "a k{k} conv with stride {stride} on {}x{} input cannot produce {}x{} for any padding in 0..{}",
                incoming.h,
                incoming.w,
                pooled.h,
                pooled.w,
                k.h.max(k.w)
            ),
        });
    };

    let mut slim = conv.clone();
    slim.stride = stride;
    slim.pad = Hw::new(ph, pw);
    let pool_input = sole_input(g, pool_id)?.to_string();
    let mut out = g.clone();
    out.node_mut(conv_id)?.kind = LayerKind::Conv(slim);
    out.remove(pool_id)?;
    out.rewire(pool_id, &pool_input);
    ensure_valid(&out)?;
    debug_assert_eq!(
        infer_shapes(&out, out.input_shape()?)?[conv_id],
        crate::graph::Chw::new(conv.out_channels(), pooled.h, pooled.w)
    );

    let mut rec = RewriteRecord::new(PassKind::AbsorbPool, conv_id, Segment::new(conv_id, pool_id));
    rec.removed_ids.push(pool_id.to_string());
    rec.retrain.push(RetrainSpec {
        layer: conv_id.to_string(),
        target: vec![TargetPiece::whole(pool_id)],
    });
    Ok((out, rec))
}
