//! Network IR: layer nodes keyed by id, validation and deterministic
//! topological ordering.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::params::{BnParams, ConvParams, FcParams, LrnParams, PoolParams, ScaleParams};
use crate::tensor::ShapeError;

mod compare;
mod exec;
mod flops;
pub mod manifest;
mod shape;

pub use compare::{compare_models, compare_models_on, top1, DivergenceReport};
pub use exec::{run_forward, run_forward_outputs, run_segment, segment_nodes};
pub(crate) use exec::forward_observed;
pub use flops::{count_flops, total_flops};
pub use manifest::{load_model, parse_model, save_model, write_model, ModelIoError};
pub use shape::{infer_shapes, Chw, ShapeMap};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph: {}", join_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("graph contains a cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("unknown node '{0}'")]
    UnknownNode(String),
    #[error("duplicate node id '{0}'")]
    DuplicateId(String),
    #[error("node '{node}': {source}")]
    Shape {
        node: String,
        #[source]
        source: ShapeError,
    },
    #[error("input tensor is {got:?} but the graph expects (_, {expected})")]
    InputShape { expected: Chw, got: [usize; 4] },
    #[error("segment {entry}..{exit}: {reason}")]
    Segment {
        entry: String,
        exit: String,
        reason: String,
    },
    #[error("models are not comparable: {0}")]
    Incomparable(String),
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

/// Layer kinds with the parameter set each one carries.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input(Chw),
    Conv(ConvParams),
    Pool(PoolParams),
    Lrn(LrnParams),
    BatchNorm(BnParams),
    Scale(ScaleParams),
    Relu,
    Softmax,
    InnerProduct(FcParams),
    Concat,
    /// Identity at inference.
    Dropout,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input(_) => "Input",
            LayerKind::Conv(_) => "Conv",
            LayerKind::Pool(_) => "Pool",
            LayerKind::Lrn(_) => "Lrn",
            LayerKind::BatchNorm(_) => "BatchNorm",
            LayerKind::Scale(_) => "Scale",
            LayerKind::Relu => "Relu",
            LayerKind::Softmax => "Softmax",
            LayerKind::InnerProduct(_) => "InnerProduct",
            LayerKind::Concat => "Concat",
            LayerKind::Dropout => "Dropout",
        }
    }

    /// Tensor layers carry high-order weight arrays (convolution and
    /// inner-product); everything else is a non-tensor layer.
    pub fn is_tensor(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::InnerProduct(_))
    }

    pub fn as_conv(&self) -> Option<&ConvParams> {
        match self {
            LayerKind::Conv(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_conv_mut(&mut self) -> Option<&mut ConvParams> {
        match self {
            LayerKind::Conv(p) => Some(p),
            _ => None,
        }
    }

    fn arity_ok(&self, inputs: usize) -> bool {
        match self {
            LayerKind::Input(_) => inputs == 0,
            LayerKind::Concat => inputs >= 2,
            _ => inputs == 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerNode {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A structural problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    MissingInput { node: String, missing: String },
    MissingOutput { id: String },
    NoOutputs,
    Arity { node: String, kind: &'static str, inputs: usize },
    InputCount { count: usize },
    Cycle { members: Vec<String> },
    BadId { id: String },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::MissingInput { node, missing } => {
                write!(f, "node '{node}' references missing input '{missing}'")
            }
            Diagnostic::MissingOutput { id } => write!(f, "output '{id}' is not a node"),
            Diagnostic::NoOutputs => write!(f, "graph declares no outputs"),
            Diagnostic::Arity { node, kind, inputs } => {
                write!(f, "node '{node}' of kind {kind} has {inputs} inputs")
            }
            Diagnostic::InputCount { count } => {
                write!(f, "expected exactly one Input node, found {count}")
            }
            Diagnostic::Cycle { members } => write!(f, "cycle through {}", members.join(", ")),
            Diagnostic::BadId { id } => write!(
                f,
                "id {id:?} must be non-empty and use only [A-Za-z0-9_./-]"
            ),
        }
    }
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'/' | b'-'))
}

/// Directed acyclic network with a single `Input` node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelGraph {
    nodes: BTreeMap<String, LayerNode>,
    outputs: Vec<String>,
}

impl ModelGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, node: LayerNode) -> Result<(), GraphError> {
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateId(node.id));
        }
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    /// Convenience for fixtures and tests.
    pub fn push(&mut self, id: &str, kind: LayerKind, inputs: &[&str]) -> Result<(), GraphError> {
        self.add(LayerNode::new(id, kind, inputs))
    }

    pub fn set_outputs<S: Into<String>>(&mut self, outputs: impl IntoIterator<Item = S>) {
        self.outputs = outputs.into_iter().map(Into::into).collect();
    }

    pub fn output_ids(&self) -> &[String] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node(&self, id: &str) -> Result<&LayerNode, GraphError> {
        self.nodes.get(id).ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    pub fn node_mut(&mut self, id: &str) -> Result<&mut LayerNode, GraphError> {
        self.nodes
            .get_mut(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &LayerNode> {
        self.nodes.values()
    }

    pub fn remove(&mut self, id: &str) -> Result<LayerNode, GraphError> {
        self.nodes
            .remove(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    /// Ids of nodes that read `id`, in id order. A node listing `id` twice
    /// appears once.
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.nodes
            .values()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Whether anything other than `allowed` reads `id`, counting graph outputs.
    pub fn has_other_readers(&self, id: &str, allowed: &str) -> bool {
        self.outputs.iter().any(|o| o == id)
            || self
                .nodes
                .values()
                .filter(|n| n.id != allowed)
                .any(|n| n.inputs.iter().any(|i| i == id))
    }

    /// Points every reader of `old` (including graph outputs) at `new`.
    pub fn rewire(&mut self, old: &str, new: &str) {
        for n in self.nodes.values_mut() {
            for i in n.inputs.iter_mut() {
                if i == old {
                    *i = new.to_string();
                }
            }
        }
        for o in self.outputs.iter_mut() {
            if o == old {
                *o = new.to_string();
            }
        }
    }

    /// The unique `Input` node.
    pub fn input_node(&self) -> Result<&LayerNode, GraphError> {
        let mut inputs = self.nodes.values().filter(|n| matches!(n.kind, LayerKind::Input(_)));
        match (inputs.next(), inputs.next()) {
            (Some(n), None) => Ok(n),
            _ => Err(GraphError::Invalid(vec![Diagnostic::InputCount {
                count: self
                    .nodes
                    .values()
                    .filter(|n| matches!(n.kind, LayerKind::Input(_)))
                    .count(),
            }])),
        }
    }

    /// Declared per-sample input shape.
    pub fn input_shape(&self) -> Result<Chw, GraphError> {
        match self.input_node()?.kind {
            LayerKind::Input(s) => Ok(s),
            _ => unreachable!(),
        }
    }

    /// Structural problems, empty when the graph is well-formed.
    pub fn validate(&self) -> Vec<Diagnostic> {
        validate(self)
    }

    pub fn check(&self) -> Result<(), GraphError> {
        let d = validate(self);
        if d.is_empty() {
            Ok(())
        } else {
            Err(GraphError::Invalid(d))
        }
    }
}

/// Reports every violation: bad ids, dangling references, arity errors,
/// input-node count and cycles.
pub fn validate(g: &ModelGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for n in g.nodes.values() {
        if !valid_id(&n.id) {
            out.push(Diagnostic::BadId { id: n.id.clone() });
        }
        if !n.kind.arity_ok(n.inputs.len()) {
            out.push(Diagnostic::Arity {
                node: n.id.clone(),
                kind: n.kind.name(),
                inputs: n.inputs.len(),
            });
        }
        for i in &n.inputs {
            if !g.nodes.contains_key(i) {
                out.push(Diagnostic::MissingInput {
                    node: n.id.clone(),
                    missing: i.clone(),
                });
            }
        }
    }
    let inputs = g
        .nodes
        .values()
        .filter(|n| matches!(n.kind, LayerKind::Input(_)))
        .count();
    if inputs != 1 {
        out.push(Diagnostic::InputCount { count: inputs });
    }
    if g.outputs.is_empty() {
        out.push(Diagnostic::NoOutputs);
    }
    for o in &g.outputs {
        if !g.nodes.contains_key(o) {
            out.push(Diagnostic::MissingOutput { id: o.clone() });
        }
    }
    if let Err(members) = kahn(g) {
        out.push(Diagnostic::Cycle { members });
    }
    out
}

/// Kahn's algorithm over existing edges with the ready set ordered by id.
/// On failure returns the nodes that lie on (or between) cycles.
fn kahn(g: &ModelGraph) -> Result<Vec<String>, Vec<String>> {
    let mut indeg: BTreeMap<&str, usize> = BTreeMap::new();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in g.nodes.values() {
        indeg.entry(&n.id).or_insert(0);
        for i in n.inputs.iter().filter(|i| g.nodes.contains_key(*i)) {
            *indeg.entry(&n.id).or_insert(0) += 1;
            succ.entry(i.as_str()).or_default().push(&n.id);
        }
    }
    let mut ready: BTreeSet<&str> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        for &s in succ.get(id).map(|v| v.as_slice()).unwrap_or(&[]) {
            let d = indeg.get_mut(s).expect("successor is a node");
            *d -= 1;
            if *d == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() == g.nodes.len() {
        return Ok(order);
    }
    // Leftovers are cycle members plus their descendants; peel off nodes with
    // no successor inside the leftover set until only cycles remain.
    let mut left: BTreeSet<&str> = indeg.iter().filter(|(_, &d)| d > 0).map(|(&k, _)| k).collect();
    let mut out_deg: BTreeMap<&str, usize> = left
        .iter()
        .map(|&id| {
            let c = succ
                .get(id)
                .map(|v| v.iter().filter(|s| left.contains(*s)).count())
                .unwrap_or(0);
            (id, c)
        })
        .collect();
    let mut sinks: VecDeque<&str> = out_deg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
    while let Some(id) = sinks.pop_front() {
        left.remove(id);
        for i in &g.nodes[id].inputs {
            if let Some(d) = out_deg.get_mut(i.as_str()) {
                if left.contains(i.as_str()) {
                    *d -= 1;
                    if *d == 0 {
                        sinks.push_back(i.as_str());
                    }
                }
            }
        }
    }
    Err(left.into_iter().map(String::from).collect())
}

/// Producers before consumers; ties broken by id.
pub fn topo_order(g: &ModelGraph) -> Result<Vec<String>, GraphError> {
    kahn(g).map_err(GraphError::Cycle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Hw;

    fn conv(o: usize, i: usize, k: usize) -> LayerKind {
        LayerKind::Conv(ConvParams::zeros(o, i, Hw::square(k), Hw::square(1), Hw::square(k / 2)))
    }

    fn chain() -> ModelGraph {
        let mut g = ModelGraph::new();
        g.push("a", LayerKind::Input(Chw::new(1, 4, 4)), &[]).unwrap();
        g.push("b", conv(2, 1, 3), &["a"]).unwrap();
        g.push("c", LayerKind::Relu, &["b"]).unwrap();
        g.set_outputs(["c"]);
        g
    }

    #[test]
    fn chain_is_valid_and_ordered() {
        let g = chain();
        assert!(g.validate().is_empty());
        assert_eq!(topo_order(&g).unwrap(), ["a", "b", "c"]);
    }

    #[test]
    fn missing_reference_named() {
        let mut g = chain();
        g.push("d", LayerKind::Relu, &["ghost"]).unwrap();
        let d = g.validate();
        assert!(d.contains(&Diagnostic::MissingInput {
            node: "d".into(),
            missing: "ghost".into()
        }));
    }

    #[test]
    fn two_node_cycle_reported() {
        let mut g = chain();
        g.push("x", LayerKind::Relu, &["y"]).unwrap();
        g.push("y", LayerKind::Relu, &["x"]).unwrap();
        g.push("z", LayerKind::Relu, &["y"]).unwrap();
        let d = g.validate();
        assert!(d.contains(&Diagnostic::Cycle {
            members: vec!["x".into(), "y".into()]
        }));
        assert!(matches!(topo_order(&g), Err(GraphError::Cycle(m)) if m == ["x", "y"]));
    }

    #[test]
    fn arity_and_input_count() {
        let mut g = ModelGraph::new();
        g.push("a", LayerKind::Relu, &[]).unwrap();
        g.push("cat", LayerKind::Concat, &["a"]).unwrap();
        g.set_outputs(["cat"]);
        let d = g.validate();
        assert!(d.iter().any(|d| matches!(d, Diagnostic::Arity { node, .. } if node == "a")));
        assert!(d.iter().any(|d| matches!(d, Diagnostic::Arity { node, .. } if node == "cat")));
        assert!(d.contains(&Diagnostic::InputCount { count: 0 }));
    }

    #[test]
    fn diamond_order_is_deterministic() {
        let mut g = ModelGraph::new();
        g.push("a", LayerKind::Input(Chw::new(1, 2, 2)), &[]).unwrap();
        g.push("c", LayerKind::Relu, &["a"]).unwrap();
        g.push("b", LayerKind::Dropout, &["a"]).unwrap();
        g.push("d", LayerKind::Concat, &["b", "c"]).unwrap();
        g.set_outputs(["d"]);
        let first = topo_order(&g).unwrap();
        assert_eq!(first, ["a", "b", "c", "d"]);
        for _ in 0..5 {
            assert_eq!(topo_order(&g).unwrap(), first);
        }
    }

    #[test]
    fn bad_ids_rejected() {
        assert!(valid_id("inception_3a/5x5.reduce-2"));
        assert!(!valid_id(""));
        assert!(!valid_id("a b"));
        assert!(!valid_id("a=b"));
        assert!(!valid_id("a,b"));
    }

    #[test]
    fn rewire_moves_readers_and_outputs() {
        let mut g = chain();
        g.rewire("c", "b");
        assert_eq!(g.output_ids(), ["b"]);
        assert!(g.consumers("c").is_empty());
        assert!(g.has_other_readers("b", "c"));
    }
}
