//! Rewrite passes that merge non-tensor layers and parallel branches into
//! convolutions, and the planner that schedules them bottom to top.

use std::fmt;

use thiserror::Error;

use crate::graph::{GraphError, ModelGraph};
use crate::tensor::Hw;

mod branch;
mod fold;
mod plan;
mod remap;
mod streamline;
mod text;

pub use branch::{reduce_bottleneck, slim_nontensor_branch, slim_tensor_branch, TensorBranchOptions};
pub use fold::{fold_bn_scale, fold_coefficients, merge_parallel_convs, FoldCoefficients};
pub use plan::{apply_plan, build_slim_plan, PlanFailure, SlimOptions, SlimPlan, Skipped};
pub use streamline::{absorb_pool, prune_lrn};
pub use text::{format_plan, format_record, parse_plan, parse_record, PlanParseError, HEADER as PLAN_HEADER};

#[derive(Debug, Error)]
pub enum SlimError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node '{id}' is {found}, expected {expected}")]
    WrongKind {
        id: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("'{second}' does not directly follow '{first}'")]
    NotAdjacent { first: String, second: String },
    #[error("activation of '{id}' is also read by '{reader}'")]
    SharedActivation { id: String, reader: String },
    #[error("pool '{pool}' cannot be absorbed into conv '{conv}': {detail}")]
    ShapeIncompatible {
        conv: String,
        pool: String,
        detail: String,
    },
    #[error("host '{host}' has kernel {host_kernel} but branch '{branch}' has kernel {branch_kernel}")]
    KernelTooSmall {
        host: String,
        host_kernel: Hw,
        branch: String,
        branch_kernel: Hw,
    },
    #[error("convolutions cannot be merged: {0}")]
    Incompatible(String),
    #[error("concat '{concat}' has only {branches} tensor branches; slimming one needs force")]
    TooFewBranches { concat: String, branches: usize },
    #[error("bottleneck ratio {0} is outside (0, 1]")]
    BadRatio(f64),
    #[error("{0}")]
    Structure(String),
}

/// The rewrite a record describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PassKind {
    FoldBnScale,
    PruneLrn,
    AbsorbPool,
    MergeParallelConv,
    SlimNonTensorBranch,
    SlimTensorBranch,
    ReduceBottleneck,
}

impl PassKind {
    pub const ALL: [PassKind; 7] = [
        PassKind::FoldBnScale,
        PassKind::PruneLrn,
        PassKind::AbsorbPool,
        PassKind::MergeParallelConv,
        PassKind::SlimNonTensorBranch,
        PassKind::SlimTensorBranch,
        PassKind::ReduceBottleneck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PassKind::FoldBnScale => "FoldBnScale",
            PassKind::PruneLrn => "PruneLrn",
            PassKind::AbsorbPool => "AbsorbPool",
            PassKind::MergeParallelConv => "MergeParallelConv",
            PassKind::SlimNonTensorBranch => "SlimNonTensorBranch",
            PassKind::SlimTensorBranch => "SlimTensorBranch",
            PassKind::ReduceBottleneck => "ReduceBottleneck",
        }
    }

    /// Exact passes keep the network function and need no retraining.
    pub fn is_exact(self) -> bool {
        matches!(self, PassKind::FoldBnScale | PassKind::MergeParallelConv)
    }
}

impl fmt::Display for PassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PassKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PassKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown pass '{s}'"))
    }
}

/// Sub-graph of the original model, from the input of `entry` to the output
/// of `exit`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub entry: String,
    pub exit: String,
}

impl Segment {
    pub fn new(entry: impl Into<String>, exit: impl Into<String>) -> Self {
        Segment {
            entry: entry.into(),
            exit: exit.into(),
        }
    }
}

/// A contiguous block of channels in a regression target: all channels of
/// the original model's activation at `node`, or the listed subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetPiece {
    pub node: String,
    pub channels: Option<Vec<usize>>,
}

impl TargetPiece {
    pub fn whole(node: impl Into<String>) -> Self {
        TargetPiece {
            node: node.into(),
            channels: None,
        }
    }
}

/// What a regenerated layer should reproduce: the channel-wise
/// concatenation of `target` pieces taken from the original model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrainSpec {
    pub layer: String,
    pub target: Vec<TargetPiece>,
}

/// Channel `i` of a rewritten concat holds original channel `map[i]`, or a
/// channel with no counterpart when `None`.
pub type ChannelMap = Vec<Option<usize>>;

/// One applied (or planned) rewrite.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteRecord {
    pub pass: PassKind,
    pub removed_ids: Vec<String>,
    /// The layer that replaces the merged structure (it keeps the id of the
    /// convolution it grew from).
    pub new_id: String,
    pub needs_retrain: bool,
    pub segment: Segment,
    /// Concat node affected by branch passes.
    pub concat: Option<String>,
    /// New channel order of `concat` relative to its original channels.
    pub channel_map: Option<ChannelMap>,
    pub ratio: Option<f64>,
    /// Reducer channels kept by a bottleneck reduction.
    pub kept: Option<Vec<usize>>,
    pub force: bool,
    /// Explicit output channel count for a grown host.
    pub channels: Option<usize>,
    /// Records sharing a group are regenerated from the original model's
    /// activations rather than from the partially slimmed one.
    pub group: Option<usize>,
    pub retrain: Vec<RetrainSpec>,
}

impl RewriteRecord {
    pub fn new(pass: PassKind, new_id: impl Into<String>, segment: Segment) -> Self {
        RewriteRecord {
            pass,
            removed_ids: Vec::new(),
            new_id: new_id.into(),
            needs_retrain: !pass.is_exact(),
            segment,
            concat: None,
            channel_map: None,
            ratio: None,
            kept: None,
            force: false,
            channels: None,
            group: None,
            retrain: Vec::new(),
        }
    }
}

/// Checks that `g` is still a well-formed graph whose shapes infer.
pub(crate) fn ensure_valid(g: &ModelGraph) -> Result<(), SlimError> {
    g.check()?;
    crate::graph::infer_shapes(g, g.input_shape()?)?;
    Ok(())
}

pub(crate) fn wrong_kind(g: &ModelGraph, id: &str, expected: &'static str) -> SlimError {
    SlimError::WrongKind {
        id: id.to_string(),
        expected,
        found: g.node(id).map(|n| n.kind.name()).unwrap_or("missing"),
    }
}

pub(crate) fn conv_of<'a>(g: &'a ModelGraph, id: &str) -> Result<&'a crate::params::ConvParams, SlimError> {
    g.node(id)?.kind.as_conv().ok_or_else(|| wrong_kind(g, id, "Conv"))
}

/// Fails unless `reader` is the only consumer of `id` and `id` is not a
/// graph output.
pub(crate) fn exclusive(g: &ModelGraph, id: &str, reader: &str) -> Result<(), SlimError> {
    if g.output_ids().iter().any(|o| o == id) {
        return Err(SlimError::SharedActivation {
            id: id.to_string(),
            reader: "<graph output>".to_string(),
        });
    }
    if let Some(other) = g.consumers(id).into_iter().find(|c| *c != reader) {
        return Err(SlimError::SharedActivation {
            id: id.to_string(),
            reader: other.to_string(),
        });
    }
    Ok(())
}

/// The single input of `id`.
pub(crate) fn sole_input<'a>(g: &'a ModelGraph, id: &str) -> Result<&'a str, SlimError> {
    match g.node(id)?.inputs.as_slice() {
        [one] => Ok(one),
        _ => Err(SlimError::Structure(format!("'{id}' does not have exactly one input"))),
    }
}

#[cfg(test)]
mod tests;
