//! Reference interpreter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use super::{topo_order, GraphError, LayerKind, ModelGraph};
use crate::kernels::{
    batch_norm, concat_channels, conv2d, inner_product, lrn, pool2d, relu, scale, softmax_channels,
};
use crate::tensor::{ShapeError, Tensor4};

pub(crate) fn apply_layer(kind: &LayerKind, inputs: &[&Tensor4]) -> Result<Tensor4, ShapeError> {
    let x = || inputs[0];
    match kind {
        LayerKind::Input(_) | LayerKind::Dropout => Ok(x().clone()),
        LayerKind::Conv(p) => conv2d(x(), p),
        LayerKind::Pool(p) => pool2d(x(), p),
        LayerKind::Lrn(p) => lrn(x(), p),
        LayerKind::BatchNorm(p) => batch_norm(x(), p),
        LayerKind::Scale(p) => scale(x(), p),
        LayerKind::Relu => Ok(relu(x())),
        LayerKind::Softmax => Ok(softmax_channels(x())),
        LayerKind::InnerProduct(p) => inner_product(x(), p),
        LayerKind::Concat => concat_channels(inputs),
    }
}

fn check_input(g: &ModelGraph, x: &Tensor4) -> Result<(), GraphError> {
    let expected = g.input_shape()?;
    if (x.c(), x.h(), x.w()) != (expected.c, expected.h, expected.w) {
        return Err(GraphError::InputShape {
            expected,
            got: x.dims(),
        });
    }
    Ok(())
}

/// Runs the whole graph, calling `observe` with the wall-clock time of every
/// layer's kernel. With `keep_all` false, activations are dropped once their
/// last reader has run and only the graph outputs are returned.
pub(crate) fn forward_observed(
    g: &ModelGraph,
    x: &Tensor4,
    keep_all: bool,
    observe: &mut dyn FnMut(&str, Duration),
) -> Result<BTreeMap<String, Tensor4>, GraphError> {
    g.check()?;
    check_input(g, x)?;
    let order = topo_order(g)?;
    let mut remaining: HashMap<&str, usize> = HashMap::new();
    for n in g.nodes() {
        for i in &n.inputs {
            *remaining.entry(i.as_str()).or_default() += 1;
        }
    }
    let outputs: BTreeSet<&str> = g.output_ids().iter().map(String::as_str).collect();
    let mut acts: BTreeMap<String, Tensor4> = BTreeMap::new();
    for id in &order {
        let node = g.node(id)?;
        let ins: Vec<&Tensor4> = if node.inputs.is_empty() {
            vec![x]
        } else {
            node.inputs.iter().map(|i| &acts[i]).collect()
        };
        let start = Instant::now();
        let out = apply_layer(&node.kind, &ins).map_err(|source| GraphError::Shape {
            node: id.clone(),
            source,
        })?;
        observe(id, start.elapsed());
        if !keep_all {
            for i in &node.inputs {
                let r = remaining.get_mut(i.as_str()).expect("counted above");
                *r -= 1;
                if *r == 0 && !outputs.contains(i.as_str()) {
                    acts.remove(i);
                }
            }
        }
        acts.insert(id.clone(), out);
    }
    Ok(acts)
}

/// Every node's activation for input batch `x`, keyed by id.
pub fn run_forward(g: &ModelGraph, x: &Tensor4) -> Result<BTreeMap<String, Tensor4>, GraphError> {
    forward_observed(g, x, true, &mut |_, _| {})
}

/// Graph outputs in `output_ids` order.
pub fn run_forward_outputs(g: &ModelGraph, x: &Tensor4) -> Result<Vec<Tensor4>, GraphError> {
    let mut acts = forward_observed(g, x, false, &mut |_, _| {})?;
    Ok(g
        .output_ids()
        .iter()
        .map(|o| acts.remove(o).expect("outputs are retained"))
        .collect())
}

fn segment_err(entry: &str, exit: &str, reason: impl Into<String>) -> GraphError {
    GraphError::Segment {
        entry: entry.to_string(),
        exit: exit.to_string(),
        reason: reason.into(),
    }
}

/// Nodes of the segment that starts at the input of `entry` and ends at
/// `exit`, in topological order.
///
/// The segment's source is the single activation feeding `entry` (or the
/// external input when `entry` is the `Input` node). Members are the nodes
/// downstream of that source and upstream of `exit`; every member must read
/// only other members or the source, so a module whose parallel branches
/// all start from the same activation forms a valid segment.
pub fn segment_nodes(g: &ModelGraph, entry: &str, exit: &str) -> Result<Vec<String>, GraphError> {
    let entry_node = g.node(entry)?;
    g.node(exit)?;
    let source = match entry_node.inputs.as_slice() {
        [] => None,
        [one] => Some(one.as_str()),
        _ => return Err(segment_err(entry, exit, "entry node has several inputs")),
    };
    let order = topo_order(g)?;
    let mut downstream: BTreeSet<&str> = BTreeSet::from([entry]);
    for id in &order {
        let n = g.node(id)?;
        if n.inputs.iter().any(|i| downstream.contains(i.as_str()) || Some(i.as_str()) == source) {
            downstream.insert(id);
        }
    }
    let mut upstream: BTreeSet<&str> = BTreeSet::from([exit]);
    for id in order.iter().rev() {
        if upstream.contains(id.as_str()) {
            for i in &g.node(id)?.inputs {
                upstream.insert(i);
            }
        }
    }
    if !upstream.contains(entry) {
        return Err(segment_err(entry, exit, "exit is not reachable from entry"));
    }
    let members: Vec<String> = order
        .iter()
        .filter(|id| downstream.contains(id.as_str()) && upstream.contains(id.as_str()))
        .cloned()
        .collect();
    for id in &members {
        for i in &g.node(id)?.inputs {
            if Some(i.as_str()) != source && !members.contains(i) {
                return Err(segment_err(
                    entry,
                    exit,
                    format!("multiple entries: '{id}' reads '{i}' from outside the segment"),
                ));
            }
        }
    }
    Ok(members)
}

/// Runs the segment from the input of `entry` to the output of `exit`,
/// feeding `x` as the activation entering `entry`.
pub fn run_segment(g: &ModelGraph, entry: &str, exit: &str, x: &Tensor4) -> Result<Tensor4, GraphError> {
    let members = segment_nodes(g, entry, exit)?;
    let mut acts: BTreeMap<&str, Tensor4> = BTreeMap::new();
    for id in &members {
        let node = g.node(id)?;
        let ins: Vec<&Tensor4> = if node.inputs.is_empty() {
            vec![x]
        } else {
            node.inputs
                .iter()
                .map(|i| acts.get(i.as_str()).unwrap_or(x))
                .collect()
        };
        let out = apply_layer(&node.kind, &ins).map_err(|source| GraphError::Shape {
            node: id.clone(),
            source,
        })?;
        acts.insert(id, out);
    }
    Ok(acts.remove(exit).expect("exit is a member"))
}
