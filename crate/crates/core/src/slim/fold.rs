//! Output-exact rewrites: batch-norm/scale folding and parallel-conv merging.

use super::{conv_of, ensure_valid, exclusive, sole_input, wrong_kind, PassKind, RewriteRecord, Segment, SlimError};
use crate::graph::{LayerKind, ModelGraph};
use crate::params::{BnParams, ConvParams, ScaleParams};
use crate::tensor::Tensor4;

/// Per-channel multipliers `eta[j] = gamma[j] / sqrt(var[j] + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldCoefficients {
    pub eta: Vec<f64>,
}

pub fn fold_coefficients(bn: &BnParams, scale: Option<&ScaleParams>) -> Result<FoldCoefficients, SlimError> {
    let eta: Vec<f64> = (0..bn.channels())
        .map(|j| {
            let gamma = scale.map_or(1.0, |s| s.gamma[j] as f64);
            gamma / (bn.var[j] as f64 + bn.eps as f64).sqrt()
        })
        .collect();
    if let Some(j) = eta.iter().position(|e| !e.is_finite()) {
        return Err(SlimError::Structure(format!(
            "fold coefficient for channel {j} is not finite (var {}, eps {})",
            bn.var[j], bn.eps
        )));
    }
    Ok(FoldCoefficients { eta })
}

/// Folds a batch-norm (and an optional scale layer after it) into the conv
/// they follow: `W'_j = eta_j W_j`, `B'_j = eta_j (B_j - mean_j) + beta_j`.
pub fn fold_bn_scale(
    g: &ModelGraph,
    conv_id: &str,
    bn_id: &str,
    scale_id: Option<&str>,
) -> Result<(ModelGraph, RewriteRecord), SlimError> {
    let conv = conv_of(g, conv_id)?;
    let LayerKind::BatchNorm(bn) = &g.node(bn_id)?.kind else {
        return Err(wrong_kind(g, bn_id, "BatchNorm"));
    };
    if sole_input(g, bn_id)? != conv_id {
        return Err(SlimError::NotAdjacent {
            first: conv_id.into(),
            second: bn_id.into(),
        });
    }
    exclusive(g, conv_id, bn_id)?;
    let scale = match scale_id {
        Some(sid) => {
            let LayerKind::Scale(s) = &g.node(sid)?.kind else {
                return Err(wrong_kind(g, sid, "Scale"));
            };
            if sole_input(g, sid)? != bn_id {
                return Err(SlimError::NotAdjacent {
                    first: bn_id.into(),
                    second: sid.into(),
                });
            }
            exclusive(g, bn_id, sid)?;
            Some(s)
        }
        None => None,
    };
    if bn.channels() != conv.out_channels() || scale.is_some_and(|s| s.channels() != conv.out_channels()) {
        return Err(SlimError::Structure(format!(
            "channel counts of '{conv_id}', '{bn_id}' and its scale layer disagree"
        )));
    }
    let eta = fold_coefficients(bn, scale)?.eta;

    let (o, i, k) = (conv.out_channels(), conv.in_channels(), conv.kernel());
    let per = i * k.h * k.w;
    let mut weights = conv.weights.data().to_vec();
    for (j, row) in weights.chunks_mut(per.max(1)).enumerate().take(o) {
        for w in row {
            *w = (eta[j] * *w as f64) as f32;
        }
    }
    let bias: Vec<f32> = (0..o)
        .map(|j| {
            let beta = scale.map_or(0.0, |s| s.beta[j] as f64);
            (eta[j] * (conv.bias[j] as f64 - bn.mean[j] as f64) + beta) as f32
        })
        .collect();
    let folded = ConvParams::new(
        Tensor4::new(o, i, k.h, k.w, weights).expect("same extents"),
        bias,
        conv.stride,
        conv.pad,
    )
    .expect("validated conv");

    let last = scale_id.unwrap_or(bn_id);
    let mut out = g.clone();
    out.node_mut(conv_id)?.kind = LayerKind::Conv(folded);
    out.remove(bn_id)?;
    if let Some(sid) = scale_id {
        out.remove(sid)?;
    }
    out.rewire(last, conv_id);
    ensure_valid(&out)?;

    let mut rec = RewriteRecord::new(PassKind::FoldBnScale, conv_id, Segment::new(conv_id, last));
    rec.removed_ids.push(bn_id.to_string());
    rec.removed_ids.extend(scale_id.map(String::from));
    Ok((out, rec))
}

/// A branch of a concat that is a conv, optionally followed by a ReLU.
struct ConvBranch {
    conv: String,
    relu: Option<String>,
    /// Node whose output the concat reads.
    tail: String,
}

fn conv_branch(g: &ModelGraph, conv_id: &str, concat_id: &str) -> Result<ConvBranch, SlimError> {
    conv_of(g, conv_id)?;
    let readers = g.consumers(conv_id);
    match readers.as_slice() {
        [r] if *r == concat_id => {
            exclusive(g, conv_id, concat_id)?;
            Ok(ConvBranch {
                conv: conv_id.into(),
                relu: None,
                tail: conv_id.into(),
            })
        }
        [r] if matches!(g.node(r)?.kind, LayerKind::Relu) => {
            let relu = r.to_string();
            exclusive(g, conv_id, &relu)?;
            exclusive(g, &relu, concat_id)?;
            Ok(ConvBranch {
                conv: conv_id.into(),
                tail: relu.clone(),
                relu: Some(relu),
            })
        }
        _ => Err(SlimError::Incompatible(format!(
            "'{conv_id}' does not feed '{concat_id}' directly or through one ReLU"
        ))),
    }
}

/// Replaces convolutions that read the same activation with identical
/// kernel, stride and padding, and whose outputs sit next to each other in a
/// concat, by one convolution with their filters stacked in concat order.
pub fn merge_parallel_convs(
    g: &ModelGraph,
    conv_ids: &[&str],
    concat_id: &str,
) -> Result<(ModelGraph, RewriteRecord), SlimError> {
    if conv_ids.len() < 2 {
        return Err(SlimError::Incompatible("need at least two convolutions".into()));
    }
    let concat = g.node(concat_id)?;
    if !matches!(concat.kind, LayerKind::Concat) {
        return Err(wrong_kind(g, concat_id, "Concat"));
    }
    let mut branches = conv_ids
        .iter()
        .map(|c| conv_branch(g, c, concat_id))
        .collect::<Result<Vec<_>, _>>()?;
    let position = |b: &ConvBranch| concat.inputs.iter().position(|i| *i == b.tail);
    branches.sort_by_key(|b| position(b));
    let positions: Vec<usize> = branches.iter().map(|b| position(b).expect("reads concat")).collect();
    if positions.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(SlimError::Incompatible(format!(
            "outputs are not adjacent in '{concat_id}' (positions {positions:?})"
        )));
    }
    if concat.inputs.iter().filter(|i| branches.iter().any(|b| b.tail == **i)).count() != branches.len() {
        return Err(SlimError::Incompatible(format!("a branch feeds '{concat_id}' twice")));
    }
    let first = &branches[0];
    let p0 = conv_of(g, &first.conv)?;
    let input = sole_input(g, &first.conv)?;
    for b in &branches[1..] {
        let p = conv_of(g, &b.conv)?;
        if sole_input(g, &b.conv)? != input {
            return Err(SlimError::Incompatible(format!(
                "'{}' and '{}' read different inputs",
                first.conv, b.conv
            )));
        }
        if (p.kernel(), p.stride, p.pad) != (p0.kernel(), p0.stride, p0.pad) {
            return Err(SlimError::Incompatible(format!(
                "'{}' is k{} s{} p{} but '{}' is k{} s{} p{}",
                first.conv,
                p0.kernel(),
                p0.stride,
                p0.pad,
                b.conv,
                p.kernel(),
                p.stride,
                p.pad
            )));
        }
        if b.relu.is_some() != first.relu.is_some() {
            return Err(SlimError::Incompatible(format!(
                "'{}' and '{}' differ in their activation",
                first.conv, b.conv
            )));
        }
    }

    let k = p0.kernel();
    let i = p0.in_channels();
    let mut weights = Vec::new();
    let mut bias = Vec::new();
    for b in &branches {
        let p = conv_of(g, &b.conv)?;
        weights.extend_from_slice(p.weights.data());
        bias.extend_from_slice(&p.bias);
    }
    let merged = ConvParams::new(
        Tensor4::new(bias.len(), i, k.h, k.w, weights).expect("stacked filters"),
        bias,
        p0.stride,
        p0.pad,
    )
    .expect("validated conv");

    let mut out = g.clone();
    out.node_mut(&first.conv)?.kind = LayerKind::Conv(merged);
    let mut removed = Vec::new();
    for b in &branches[1..] {
        out.remove(&b.conv)?;
        removed.push(b.conv.clone());
        if let Some(r) = &b.relu {
            out.remove(r)?;
            removed.push(r.clone());
        }
    }
    let tails: Vec<&str> = branches[1..].iter().map(|b| b.tail.as_str()).collect();
    let cat = out.node_mut(concat_id)?;
    cat.inputs.retain(|i| !tails.contains(&i.as_str()));
    if cat.inputs.len() == 1 {
        out.remove(concat_id)?;
        out.rewire(concat_id, &first.tail);
        removed.push(concat_id.to_string());
    }
    ensure_valid(&out)?;

    let mut rec = RewriteRecord::new(PassKind::MergeParallelConv, first.conv.clone(), Segment::new(first.conv.clone(), concat_id));
    rec.removed_ids = removed;
    rec.concat = Some(concat_id.to_string());
    Ok((out, rec))
}
