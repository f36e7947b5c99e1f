//! Horizontal merges: absorbing concat branches into a host convolution and
//! shrinking bottleneck reducers.

use super::remap::remap_consumers;
use super::{
    conv_of, ensure_valid, exclusive, sole_input, wrong_kind, ChannelMap, PassKind, RetrainSpec, RewriteRecord,
    Segment, SlimError, TargetPiece,
};
use crate::graph::{infer_shapes, LayerKind, ModelGraph};
use crate::params::ConvParams;
use crate::tensor::{Hw, Tensor4};

/// A single-input chain of nodes ending in a concat input.
#[derive(Debug)]
pub(crate) struct Branch {
    /// Chain order, head first.
    pub nodes: Vec<String>,
    /// The activation the head reads.
    pub source: String,
    pub concat: String,
}

impl Branch {
    pub fn head(&self) -> &str {
        &self.nodes[0]
    }

    pub fn tail(&self) -> &str {
        self.nodes.last().expect("non-empty")
    }
}

/// Orders `ids` into a chain and finds the concat reading its tail.
pub(crate) fn chain_of(g: &ModelGraph, ids: &[&str]) -> Result<Branch, SlimError> {
    if ids.is_empty() {
        return Err(SlimError::Structure("empty branch".into()));
    }
    let inside = |id: &str| ids.contains(&id);
    let heads: Vec<&str> = ids
        .iter()
        .copied()
        .filter(|id| sole_input(g, id).map(|i| !inside(i)).unwrap_or(true))
        .collect();
    let [head] = heads.as_slice() else {
        return Err(SlimError::Structure(format!("{ids:?} is not a single-input chain")));
    };
    let source = sole_input(g, head)?.to_string();
    let mut nodes = vec![head.to_string()];
    loop {
        let cur = nodes.last().expect("non-empty").clone();
        let readers = g.consumers(&cur);
        let next: Vec<&str> = readers.iter().copied().filter(|r| inside(r)).collect();
        match next.as_slice() {
            [] => break,
            [n] => {
                exclusive(g, &cur, n)?;
                nodes.push(n.to_string());
            }
            _ => return Err(SlimError::Structure(format!("'{cur}' fans out inside the branch"))),
        }
    }
    if nodes.len() != ids.len() {
        return Err(SlimError::Structure(format!("{ids:?} is not a single-input chain")));
    }
    let tail = nodes.last().expect("non-empty");
    let readers = g.consumers(tail);
    let concat = match readers.as_slice() {
        [c] if matches!(g.node(c)?.kind, LayerKind::Concat) => c.to_string(),
        _ => return Err(SlimError::Structure(format!("branch tail '{tail}' does not feed exactly one concat"))),
    };
    exclusive(g, tail, &concat)?;
    Ok(Branch { nodes, source, concat })
}

/// The branch of `concat` that contains `conv_id`: from the node reading
/// `source` down to the concat input.
pub(crate) fn branch_through(g: &ModelGraph, conv_id: &str, concat: &str, source: &str) -> Result<Branch, SlimError> {
    let mut down = vec![conv_id.to_string()];
    loop {
        let cur = down.last().expect("non-empty").clone();
        let readers = g.consumers(&cur);
        match readers.as_slice() {
            [r] if *r == concat => break,
            [r] if matches!(g.node(r)?.kind, LayerKind::Relu | LayerKind::Dropout) => {
                exclusive(g, &cur, r)?;
                down.push(r.to_string());
            }
            _ => {
                return Err(SlimError::Structure(format!(
                    "'{conv_id}' does not reach '{concat}' through an exclusive chain"
                )))
            }
        }
    }
    exclusive(g, down.last().expect("non-empty"), concat)?;
    let mut up = Vec::new();
    let mut cur = conv_id.to_string();
    loop {
        let input = sole_input(g, &cur)
            .map_err(|_| SlimError::Structure(format!("'{conv_id}' does not descend from '{source}'")))?
            .to_string();
        if input == source {
            break;
        }
        exclusive(g, &input, &cur)?;
        up.push(input.clone());
        cur = input;
    }
    up.reverse();
    up.extend(down);
    Ok(Branch {
        nodes: up,
        source: source.to_string(),
        concat: concat.to_string(),
    })
}

fn largest_kernel(g: &ModelGraph, nodes: &[String]) -> Hw {
    nodes
        .iter()
        .filter_map(|id| match &g.node(id).ok()?.kind {
            LayerKind::Conv(p) => Some(p.kernel()),
            LayerKind::Pool(p) => Some(p.kernel),
            _ => None,
        })
        .fold(Hw::new(1, 1), |a, k| Hw::new(a.h.max(k.h), a.w.max(k.w)))
}

fn covers(host: Hw, branch: Hw) -> bool {
    host.h >= branch.h && host.w >= branch.w
}

fn grow_conv(p: &ConvParams, out_channels: usize) -> ConvParams {
    let k = p.kernel();
    let mut data = p.weights.data().to_vec();
    data.resize(out_channels * p.in_channels() * k.h * k.w, 0.0);
    let mut bias = p.bias.clone();
    bias.resize(out_channels, 0.0);
    ConvParams {
        weights: Tensor4::new(out_channels, p.in_channels(), k.h, k.w, data).expect("sized above"),
        bias,
        stride: p.stride,
        pad: p.pad,
    }
}

/// Node of the absorbed branch whose original output the host regenerates:
/// its last convolution, or its last pooling layer when it has none.
fn absorbed_target(g: &ModelGraph, branch: &Branch) -> Result<String, SlimError> {
    let pick = |want: fn(&LayerKind) -> bool| {
        branch
            .nodes
            .iter()
            .rev()
            .find(|id| g.node(id).map(|n| want(&n.kind)).unwrap_or(false))
            .cloned()
    };
    pick(|k| matches!(k, LayerKind::Conv(_)))
        .or_else(|| pick(|k| matches!(k, LayerKind::Pool(_))))
        .ok_or_else(|| SlimError::Structure(format!("branch ending in '{}' has no conv or pool", branch.tail())))
}

fn absorb_branch(
    g: &ModelGraph,
    pass: PassKind,
    branch: &Branch,
    host_id: &str,
    channels: Option<usize>,
) -> Result<(ModelGraph, RewriteRecord), SlimError> {
    let host = conv_of(g, host_id)?;
    let host_branch = branch_through(g, host_id, &branch.concat, &branch.source)?;
    if host_branch.nodes.iter().any(|n| branch.nodes.contains(n)) {
        return Err(SlimError::Structure(format!("'{host_id}' lies inside the absorbed branch")));
    }
    let shapes = infer_shapes(g, g.input_shape()?)?;
    let concat = g.node(&branch.concat)?;
    let mut offsets = Vec::with_capacity(concat.inputs.len());
    let mut total = 0;
    for i in &concat.inputs {
        offsets.push(total);
        total += shapes[i].c;
    }
    let pos_of = |id: &str| concat.inputs.iter().position(|i| i == id).expect("concat input");
    let (host_pos, branch_pos) = (pos_of(host_branch.tail()), pos_of(branch.tail()));
    let absorbed_c = shapes[branch.tail()].c;
    let host_c = host.out_channels();
    let needed = host_c + absorbed_c;
    let new_o = channels.unwrap_or(needed);
    if new_o < needed {
        return Err(SlimError::Structure(format!(
            "'{host_id}' needs at least {needed} output channels, {new_o} requested"
        )));
    }

    let mut map: ChannelMap = Vec::with_capacity(total - absorbed_c + (new_o - needed));
    let mut new_inputs = Vec::new();
    for (p, input) in concat.inputs.iter().enumerate() {
        if p == branch_pos {
            continue;
        }
        new_inputs.push(input.clone());
        let span = |pos: usize, c: usize| (offsets[pos]..offsets[pos] + c).map(Some);
        if p == host_pos {
            map.extend(span(host_pos, host_c));
            map.extend(span(branch_pos, absorbed_c));
            map.extend(std::iter::repeat_n(None, new_o - needed));
        } else {
            map.extend(span(p, shapes[input].c));
        }
    }

    let target = absorbed_target(g, branch)?;
    let mut out = g.clone();
    out.node_mut(host_id)?.kind = LayerKind::Conv(grow_conv(host, new_o));
    for id in &branch.nodes {
        out.remove(id)?;
    }
    let concat_id = branch.concat.clone();
    let mut removed = branch.nodes.clone();
    let source_of_channels = if new_inputs.len() == 1 {
        out.remove(&concat_id)?;
        out.rewire(&concat_id, host_branch.tail());
        removed.push(concat_id.clone());
        host_branch.tail().to_string()
    } else {
        out.node_mut(&concat_id)?.inputs = new_inputs;
        concat_id.clone()
    };
    remap_consumers(&mut out, &source_of_channels, &map, total)?;
    ensure_valid(&out)?;

    let mut rec = RewriteRecord::new(pass, host_id, Segment::new(host_branch.head(), concat_id.clone()));
    rec.removed_ids = removed;
    rec.concat = Some(concat_id);
    rec.channel_map = Some(map);
    rec.channels = channels;
    rec.retrain.push(RetrainSpec {
        layer: host_id.to_string(),
        target: vec![TargetPiece::whole(host_id), TargetPiece::whole(target)],
    });
    Ok((out, rec))
}

/// Removes a pooling branch of a concat (the pool and any projection after
/// it) and grows `host_conv_id`, a convolution in a sibling branch, by the
/// branch's channel count. The host's kernel must be at least as large as the
/// pooling window.
pub fn slim_nontensor_branch(
    g: &ModelGraph,
    pool_branch_ids: &[&str],
    host_conv_id: &str,
) -> Result<(ModelGraph, RewriteRecord), SlimError> {
    let branch = chain_of(g, pool_branch_ids)?;
    let LayerKind::Pool(pool) = &g.node(branch.head())?.kind else {
        return Err(wrong_kind(g, branch.head(), "Pool"));
    };
    for id in &branch.nodes[1..] {
        if !matches!(g.node(id)?.kind, LayerKind::Conv(_) | LayerKind::Relu | LayerKind::Dropout) {
            return Err(SlimError::Structure(format!(
                "pooling branch contains {} node '{id}'",
                g.node(id)?.kind.name()
            )));
        }
    }
    let host_kernel = conv_of(g, host_conv_id)?.kernel();
    if !covers(host_kernel, pool.kernel) {
        return Err(SlimError::KernelTooSmall {
            host: host_conv_id.into(),
            host_kernel,
            branch: branch.head().into(),
            branch_kernel: pool.kernel,
        });
    }
    absorb_branch(g, PassKind::SlimNonTensorBranch, &branch, host_conv_id, None)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBranchOptions {
    /// Slim even when the concat has only two tensor branches.
    pub force: bool,
    /// Output channels of the grown host instead of host + branch channels.
    pub channels: Option<usize>,
}

/// Number of concat inputs whose branch starts with a convolution.
pub(crate) fn tensor_branch_count(g: &ModelGraph, concat_id: &str) -> Result<usize, SlimError> {
    let mut count = 0;
    for input in &g.node(concat_id)?.inputs {
        let mut cur = input.clone();
        while let [one] = g.node(&cur)?.inputs.as_slice() {
            if g.consumers(one).len() != 1 || matches!(g.node(one)?.kind, LayerKind::Input(_)) {
                break;
            }
            cur = one.clone();
        }
        if g.node(&cur)?.kind.as_conv().is_some() {
            count += 1;
        }
    }
    Ok(count)
}

/// Removes a convolution branch of a concat and grows `host_conv_id` by its
/// channel count. The branch's kernels must not exceed the host's.
pub fn slim_tensor_branch(
    g: &ModelGraph,
    small_branch_ids: &[&str],
    host_conv_id: &str,
    opts: &TensorBranchOptions,
) -> Result<(ModelGraph, RewriteRecord), SlimError> {
    let branch = chain_of(g, small_branch_ids)?;
    if g.node(branch.head())?.kind.as_conv().is_none() {
        return Err(wrong_kind(g, branch.head(), "Conv"));
    }
    for id in &branch.nodes {
        if !matches!(g.node(id)?.kind, LayerKind::Conv(_) | LayerKind::Relu | LayerKind::Dropout) {
            return Err(SlimError::Structure(format!(
                "tensor branch contains {} node '{id}'",
                g.node(id)?.kind.name()
            )));
        }
    }
    let host_kernel = conv_of(g, host_conv_id)?.kernel();
    let branch_kernel = largest_kernel(g, &branch.nodes);
    if !covers(host_kernel, branch_kernel) {
        return Err(SlimError::KernelTooSmall {
            host: host_conv_id.into(),
            host_kernel,
            branch: branch.head().into(),
            branch_kernel,
        });
    }
    let branches = tensor_branch_count(g, &branch.concat)?;
    if branches <= 2 && !opts.force {
        return Err(SlimError::TooFewBranches {
            concat: branch.concat.clone(),
            branches,
        });
    }
    let (out, mut rec) = absorb_branch(g, PassKind::SlimTensorBranch, &branch, host_conv_id, opts.channels)?;
    rec.force = opts.force;
    Ok((out, rec))
}

/// Shrinks a 1x1 reducer convolution to `round(O * ratio)` output channels,
/// keeping the channels the following convolution weights most heavily, and
/// trims that convolution's inputs to match. Returns `None` when the channel
/// count would not change.
pub fn reduce_bottleneck(
    g: &ModelGraph,
    reducer_id: &str,
    ratio: f64,
) -> Result<Option<(ModelGraph, RewriteRecord)>, SlimError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(SlimError::BadRatio(ratio));
    }
    let reducer = conv_of(g, reducer_id)?;
    if reducer.kernel() != Hw::new(1, 1) {
        return Err(SlimError::Structure(format!(
            "reducer '{reducer_id}' has kernel {}, expected 1x1",
            reducer.kernel()
        )));
    }
    let mut cur = reducer_id.to_string();
    let down_id = loop {
        let readers = g.consumers(&cur);
        let [r] = readers.as_slice() else {
            return Err(SlimError::Structure(format!("'{cur}' does not feed a single layer")));
        };
        exclusive(g, &cur, r)?;
        match &g.node(r)?.kind {
            LayerKind::Relu | LayerKind::Dropout => cur = r.to_string(),
            LayerKind::Conv(p) if p.kernel().product() > 1 => break r.to_string(),
            other => {
                return Err(SlimError::Structure(format!(
                    "reducer '{reducer_id}' feeds {} node '{r}', not a larger-kernel conv",
                    other.name()
                )))
            }
        }
    };
    let old_o = reducer.out_channels();
    let new_o = ((old_o as f64 * ratio).round() as usize).max(1);
    if new_o >= old_o {
        return Ok(None);
    }
    let down = conv_of(g, &down_id)?;
    let plane = down.kernel().product();
    let norms: Vec<f64> = (0..old_o)
        .map(|c| {
            (0..down.out_channels())
                .flat_map(|o| {
                    let start = (o * old_o + c) * plane;
                    down.weights.data()[start..start + plane].iter()
                })
                .map(|&w| (w as f64) * (w as f64))
                .sum()
        })
        .collect();
    let mut ranked: Vec<usize> = (0..old_o).collect();
    ranked.sort_by(|a, b| norms[*b].total_cmp(&norms[*a]).then(a.cmp(b)));
    let mut kept: Vec<usize> = ranked[..new_o].to_vec();
    kept.sort_unstable();

    let per = reducer.in_channels();
    let mut w = Vec::with_capacity(new_o * per);
    for &c in &kept {
        w.extend_from_slice(reducer.filter(c));
    }
    let slim_reducer = ConvParams {
        weights: Tensor4::new(new_o, per, 1, 1, w).expect("sized above"),
        bias: kept.iter().map(|&c| reducer.bias[c]).collect(),
        stride: reducer.stride,
        pad: reducer.pad,
    };
    let map: ChannelMap = kept.iter().map(|&c| Some(c)).collect();
    let mut out = g.clone();
    out.node_mut(reducer_id)?.kind = LayerKind::Conv(slim_reducer);
    remap_consumers(&mut out, reducer_id, &map, old_o)?;
    ensure_valid(&out)?;

    let mut rec = RewriteRecord::new(PassKind::ReduceBottleneck, reducer_id, Segment::new(reducer_id, down_id.clone()));
    rec.ratio = Some(ratio);
    rec.kept = Some(kept.clone());
    rec.retrain.push(RetrainSpec {
        layer: reducer_id.to_string(),
        target: vec![TargetPiece {
            node: reducer_id.to_string(),
            channels: Some(kept),
        }],
    });
    rec.retrain.push(RetrainSpec {
        layer: down_id.clone(),
        target: vec![TargetPiece::whole(down_id)],
    });
    Ok(Some((out, rec)))
}
