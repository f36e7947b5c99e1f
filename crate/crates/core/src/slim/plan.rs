//! Finding slimmable structures and applying rewrites in order.

use std::collections::BTreeMap;

use thiserror::Error;

use super::branch::Branch;
use super::{
    absorb_pool, fold_bn_scale, merge_parallel_convs, prune_lrn, reduce_bottleneck, slim_nontensor_branch,
    slim_tensor_branch, PassKind, RetrainSpec, RewriteRecord, SlimError, TargetPiece, TensorBranchOptions,
};
use crate::graph::{infer_shapes, topo_order, LayerKind, ModelGraph, ShapeMap};
use crate::tensor::Hw;

/// Which rewrites the planner may use.
#[derive(Debug, Clone, PartialEq)]
pub struct SlimOptions {
    pub fold_bn: bool,
    pub prune_lrn: bool,
    pub absorb_pool: bool,
    pub merge_parallel: bool,
    pub slim_nontensor_branch: bool,
    pub slim_tensor_branch: bool,
    /// Bottleneck reducers shrink to this fraction of their channels; 1.0
    /// leaves them alone.
    pub bottleneck_ratio: f64,
    /// Allow tensor-branch slimming in modules with only two tensor branches.
    pub force_two_branch: bool,
    /// Output channels for specific hosts grown by tensor-branch slimming.
    pub channel_overrides: BTreeMap<String, usize>,
    /// Give each run of consecutive branch records a shared group id.
    pub group_branch_records: bool,
}

impl Default for SlimOptions {
    fn default() -> Self {
        SlimOptions {
            fold_bn: true,
            prune_lrn: true,
            absorb_pool: true,
            merge_parallel: true,
            slim_nontensor_branch: true,
            slim_tensor_branch: true,
            bottleneck_ratio: 1.0,
            force_two_branch: false,
            channel_overrides: BTreeMap::new(),
            group_branch_records: false,
        }
    }
}

impl SlimOptions {
    /// Only the rewrites that keep the network function exactly.
    pub fn exact_only() -> Self {
        SlimOptions {
            prune_lrn: false,
            absorb_pool: false,
            slim_nontensor_branch: false,
            slim_tensor_branch: false,
            ..Self::default()
        }
    }
}

/// A structure the planner matched but could not rewrite.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub pass: PassKind,
    pub at: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlimPlan {
    pub records: Vec<RewriteRecord>,
    pub skipped: Vec<Skipped>,
}

impl SlimPlan {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A plan that stopped part way.
#[derive(Debug, Error)]
#[error("plan record {index} ({pass} on '{new_id}') failed after {} applied records: {source}", applied.len())]
pub struct PlanFailure {
    pub index: usize,
    pub pass: PassKind,
    pub new_id: String,
    #[source]
    pub source: SlimError,
    /// Records applied before the failure.
    pub applied: Vec<RewriteRecord>,
    /// The graph after those records.
    pub partial: ModelGraph,
}

/// Applies passes to a working copy and keeps regression targets expressed
/// in terms of the original graph.
struct Applier<'a> {
    shapes: ShapeMap,
    graph: ModelGraph,
    /// What each rewritten layer's output stands for in the original graph.
    layouts: BTreeMap<String, Vec<TargetPiece>>,
    records: Vec<RewriteRecord>,
    original: &'a ModelGraph,
}

impl<'a> Applier<'a> {
    fn new(original: &'a ModelGraph) -> Result<Self, SlimError> {
        Ok(Applier {
            shapes: infer_shapes(original, original.input_shape()?)?,
            graph: original.clone(),
            layouts: BTreeMap::new(),
            records: Vec::new(),
            original,
        })
    }

    fn channels_of(&self, piece: &TargetPiece) -> Vec<usize> {
        match &piece.channels {
            Some(c) => c.clone(),
            None => (0..self.shapes.get(&piece.node).map_or(0, |s| s.c)).collect(),
        }
    }

    /// Rewrites pieces that name rewritten layers into original-graph pieces.
    fn resolve(&self, pieces: &[TargetPiece]) -> Result<Vec<TargetPiece>, SlimError> {
        let mut out: Vec<TargetPiece> = Vec::new();
        for piece in pieces {
            let Some(layout) = self.layouts.get(&piece.node) else {
                if !self.original.contains(&piece.node) {
                    return Err(SlimError::Structure(format!(
                        "target '{}' is not part of the original graph",
                        piece.node
                    )));
                }
                out.push(piece.clone());
                continue;
            };
            let Some(selection) = &piece.channels else {
                out.extend(layout.iter().cloned());
                continue;
            };
            let flat: Vec<(&str, usize)> = layout
                .iter()
                .flat_map(|p| self.channels_of(p).into_iter().map(move |c| (p.node.as_str(), c)))
                .collect();
            for &s in selection {
                let &(node, c) = flat.get(s).ok_or_else(|| {
                    SlimError::Structure(format!("channel {s} is outside the layout of '{}'", piece.node))
                })?;
                match out.last_mut() {
                    Some(TargetPiece {
                        node: n,
                        channels: Some(cs),
                    }) if n == node => cs.push(c),
                    _ => out.push(TargetPiece {
                        node: node.to_string(),
                        channels: Some(vec![c]),
                    }),
                }
            }
        }
        // a full, in-order channel list is the whole activation
        for p in out.iter_mut() {
            if let Some(cs) = &p.channels {
                let full = self.shapes.get(&p.node).map_or(usize::MAX, |s| s.c);
                if cs.len() == full && cs.iter().enumerate().all(|(i, c)| i == *c) {
                    p.channels = None;
                }
            }
        }
        Ok(out)
    }

    fn accept(&mut self, graph: ModelGraph, mut rec: RewriteRecord) -> Result<RewriteRecord, SlimError> {
        let touched: Vec<&str> = match rec.pass {
            PassKind::FoldBnScale => vec![rec.new_id.as_str()],
            PassKind::MergeParallelConv => std::iter::once(rec.new_id.as_str())
                .chain(rec.removed_ids.iter().map(String::as_str))
                .collect(),
            _ => vec![],
        };
        if let Some(t) = touched.iter().find(|t| self.layouts.contains_key(**t)) {
            return Err(SlimError::Structure(format!(
                "exact {} cannot follow a rewrite of '{t}'",
                rec.pass
            )));
        }
        match rec.pass {
            PassKind::FoldBnScale => {
                let last = rec.segment.exit.clone();
                self.layouts.insert(rec.new_id.clone(), vec![TargetPiece::whole(last)]);
            }
            PassKind::MergeParallelConv => {
                let convs: Vec<TargetPiece> = std::iter::once(&rec.new_id)
                    .chain(&rec.removed_ids)
                    .filter(|id| self.original.node(id).is_ok_and(|n| n.kind.as_conv().is_some()))
                    .map(TargetPiece::whole)
                    .collect();
                self.layouts.insert(rec.new_id.clone(), convs);
            }
            _ => {}
        }
        let mut resolved = Vec::with_capacity(rec.retrain.len());
        for spec in &rec.retrain {
            resolved.push(RetrainSpec {
                layer: spec.layer.clone(),
                target: self.resolve(&spec.target)?,
            });
        }
        for spec in &resolved {
            self.layouts.insert(spec.layer.clone(), spec.target.clone());
        }
        rec.retrain = resolved;
        self.graph = graph;
        self.records.push(rec.clone());
        Ok(rec)
    }

    fn run(
        &mut self,
        pass: impl FnOnce(&ModelGraph) -> Result<(ModelGraph, RewriteRecord), SlimError>,
    ) -> Result<RewriteRecord, SlimError> {
        let (g, rec) = pass(&self.graph)?;
        self.accept(g, rec)
    }

    /// Replays a planned record against the working graph.
    fn replay(&mut self, planned: &RewriteRecord) -> Result<RewriteRecord, SlimError> {
        let removed: Vec<&str> = planned.removed_ids.iter().map(String::as_str).collect();
        let first = || {
            removed
                .first()
                .copied()
                .ok_or_else(|| SlimError::Structure(format!("{} record removes nothing", planned.pass)))
        };
        let branch: Vec<&str> = removed
            .iter()
            .copied()
            .filter(|id| Some(*id) != planned.concat.as_deref())
            .collect();
        let new_id = planned.new_id.as_str();
        let mut rec = match planned.pass {
            PassKind::FoldBnScale => {
                let bn = first()?;
                let g = &self.graph;
                let (g2, r) = fold_bn_scale(g, new_id, bn, removed.get(1).copied())?;
                self.accept(g2, r)?
            }
            PassKind::PruneLrn => {
                let lrn = first()?;
                self.run(|g| prune_lrn(g, lrn))?
            }
            PassKind::AbsorbPool => {
                let pool = first()?;
                self.run(|g| absorb_pool(g, new_id, pool))?
            }
            PassKind::MergeParallelConv => {
                let concat = planned
                    .concat
                    .clone()
                    .ok_or_else(|| SlimError::Structure("merge record names no concat".into()))?;
                let g = &self.graph;
                let mut convs = vec![new_id];
                convs.extend(
                    branch
                        .iter()
                        .copied()
                        .filter(|id| g.node(id).is_ok_and(|n| n.kind.as_conv().is_some())),
                );
                let (g2, r) = merge_parallel_convs(g, &convs, &concat)?;
                self.accept(g2, r)?
            }
            PassKind::SlimNonTensorBranch => self.run(|g| slim_nontensor_branch(g, &branch, new_id))?,
            PassKind::SlimTensorBranch => {
                let opts = TensorBranchOptions {
                    force: planned.force,
                    channels: planned.channels,
                };
                self.run(|g| slim_tensor_branch(g, &branch, new_id, &opts))?
            }
            PassKind::ReduceBottleneck => {
                let ratio = planned
                    .ratio
                    .ok_or_else(|| SlimError::Structure("reduce record has no ratio".into()))?;
                match reduce_bottleneck(&self.graph, new_id, ratio)? {
                    Some((g2, r)) => self.accept(g2, r)?,
                    None => {
                        return Err(SlimError::Structure(format!(
                            "reducing '{new_id}' by {ratio} changes nothing"
                        )))
                    }
                }
            }
        };
        rec.group = planned.group;
        if let Some(last) = self.records.last_mut() {
            last.group = planned.group;
        }
        Ok(rec)
    }
}

/// Applies `plan` to `g` in order. Returned records carry regression targets
/// expressed in the original graph's node ids.
pub fn apply_plan(g: &ModelGraph, plan: &SlimPlan) -> Result<(ModelGraph, Vec<RewriteRecord>), PlanFailure> {
    let fail = |index: usize, planned: &RewriteRecord, source: SlimError, applied, partial| PlanFailure {
        index,
        pass: planned.pass,
        new_id: planned.new_id.clone(),
        source,
        applied,
        partial,
    };
    let mut app = match Applier::new(g) {
        Ok(a) => a,
        Err(e) => match plan.records.first() {
            Some(first) => return Err(fail(0, first, e, Vec::new(), g.clone())),
            None => return Ok((g.clone(), Vec::new())),
        },
    };
    for (index, planned) in plan.records.iter().enumerate() {
        if let Err(e) = app.replay(planned) {
            return Err(fail(index, planned, e, app.records, app.graph));
        }
    }
    Ok((app.graph, app.records))
}

struct Planner<'a, 'o> {
    app: Applier<'o>,
    opts: &'a SlimOptions,
    skipped: Vec<Skipped>,
}

impl Planner<'_, '_> {
    fn attempt(
        &mut self,
        kind: PassKind,
        at: &str,
        pass: impl FnOnce(&ModelGraph) -> Result<(ModelGraph, RewriteRecord), SlimError>,
    ) -> bool {
        match self.app.run(pass) {
            Ok(_) => true,
            Err(e) => {
                self.skipped.push(Skipped {
                    pass: kind,
                    at: at.to_string(),
                    reason: e.to_string(),
                });
                false
            }
        }
    }

    /// conv -> [bn [scale]] -> (relu | dropout | lrn | pool)* streamlines.
    fn streamline(&mut self, conv: &str) {
        let sole_reader = |g: &ModelGraph, id: &str| -> Option<String> {
            let readers = g.consumers(id);
            match readers.as_slice() {
                [r] if !g.output_ids().iter().any(|o| o == id) => Some(r.to_string()),
                _ => None,
            }
        };
        if self.opts.fold_bn {
            let g = &self.app.graph;
            if let Some(bn) = sole_reader(g, conv).filter(|r| matches!(g.node(r).map(|n| &n.kind), Ok(LayerKind::BatchNorm(_)))) {
                let scale = sole_reader(g, &bn).filter(|r| matches!(g.node(r).map(|n| &n.kind), Ok(LayerKind::Scale(_))));
                self.attempt(PassKind::FoldBnScale, &bn, |g| fold_bn_scale(g, conv, &bn, scale.as_deref()));
            }
        }
        let mut chain = Vec::new();
        let mut cur = conv.to_string();
        let mut pools = 0;
        while let Some(next) = sole_reader(&self.app.graph, &cur) {
            match &self.app.graph.node(&next).map(|n| n.kind.clone()) {
                Ok(LayerKind::Relu | LayerKind::Dropout) => {}
                Ok(LayerKind::Lrn(_)) => chain.push((PassKind::PruneLrn, next.clone())),
                Ok(LayerKind::Pool(_)) if pools == 0 => {
                    pools += 1;
                    chain.push((PassKind::AbsorbPool, next.clone()));
                }
                _ => break,
            }
            cur = next;
        }
        for (kind, id) in chain {
            match kind {
                PassKind::PruneLrn if self.opts.prune_lrn => {
                    self.attempt(kind, &id, |g| prune_lrn(g, &id));
                }
                PassKind::AbsorbPool if self.opts.absorb_pool => {
                    self.attempt(kind, &id, |g| absorb_pool(g, conv, &id));
                }
                _ => {}
            }
        }
    }

    /// Branches of `concat` that all start from one activation.
    fn module_branches(&self, concat: &str) -> Result<Vec<Branch>, SlimError> {
        let g = &self.app.graph;
        let node = g.node(concat)?;
        let mut chains = Vec::new();
        for input in &node.inputs {
            let mut nodes = vec![input.clone()];
            loop {
                let cur = nodes.last().expect("non-empty");
                match g.node(cur)?.inputs.as_slice() {
                    [one] if g.consumers(one).len() == 1 && !g.output_ids().contains(one) => {
                        if matches!(g.node(one)?.kind, LayerKind::Input(_)) {
                            break;
                        }
                        nodes.push(one.clone());
                    }
                    _ => break,
                }
            }
            nodes.reverse();
            chains.push(nodes);
        }
        let mut sources = Vec::new();
        for c in &chains {
            match g.node(&c[0])?.inputs.as_slice() {
                [one] => sources.push(one.clone()),
                _ => return Err(SlimError::Structure(format!("branch head '{}' has no single input", c[0]))),
            }
        }
        if sources.windows(2).any(|w| w[0] != w[1]) {
            return Err(SlimError::Structure(format!("branches of '{concat}' start from different activations")));
        }
        Ok(chains
            .into_iter()
            .zip(sources)
            .map(|(nodes, source)| Branch {
                nodes,
                source,
                concat: concat.to_string(),
            })
            .collect())
    }

    fn last_conv<'g>(&self, b: &'g Branch) -> Option<&'g str> {
        b.nodes
            .iter()
            .rev()
            .find(|id| self.app.graph.node(id).is_ok_and(|n| n.kind.as_conv().is_some()))
            .map(String::as_str)
    }

    fn kind_of(&self, id: &str) -> Option<LayerKind> {
        self.app.graph.node(id).ok().map(|n| n.kind.clone())
    }

    fn module(&mut self, concat: &str) {
        let Ok(branches) = self.module_branches(concat) else {
            return;
        };
        if self.opts.merge_parallel {
            self.merge_runs(concat, &branches);
        }
        if self.opts.slim_nontensor_branch {
            self.nontensor(concat);
        }
        if self.opts.slim_tensor_branch {
            self.tensor(concat);
        }
        if self.opts.bottleneck_ratio < 1.0 {
            self.reduce(concat);
        }
    }

    /// Key shared by mergeable conv branches: kernel, stride, pad, relu.
    fn merge_key(&self, b: &Branch) -> Option<(Hw, Hw, Hw, bool)> {
        let kinds: Vec<LayerKind> = b.nodes.iter().filter_map(|id| self.kind_of(id)).collect();
        match kinds.as_slice() {
            [LayerKind::Conv(p)] => Some((p.kernel(), p.stride, p.pad, false)),
            [LayerKind::Conv(p), LayerKind::Relu] => Some((p.kernel(), p.stride, p.pad, true)),
            _ => None,
        }
    }

    fn merge_runs(&mut self, concat: &str, branches: &[Branch]) {
        let keys: Vec<_> = branches.iter().map(|b| self.merge_key(b)).collect();
        let mut start = 0;
        while start < branches.len() {
            let mut end = start + 1;
            while end < branches.len() && keys[start].is_some() && keys[end] == keys[start] {
                end += 1;
            }
            if end - start >= 2 {
                let convs: Vec<&str> = branches[start..end].iter().map(|b| b.head()).collect();
                self.attempt(PassKind::MergeParallelConv, convs[0], |g| merge_parallel_convs(g, &convs, concat));
            }
            start = end;
        }
    }

    fn tensor_hosts(&self, branches: &[Branch]) -> Vec<(usize, String, Hw)> {
        branches
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(self.kind_of(b.head()), Some(LayerKind::Conv(_))))
            .filter_map(|(i, b)| {
                let c = self.last_conv(b)?;
                let k = self.kind_of(c)?.as_conv()?.kernel();
                Some((i, c.to_string(), k))
            })
            .collect()
    }

    fn nontensor(&mut self, concat: &str) {
        loop {
            let Ok(branches) = self.module_branches(concat) else {
                return;
            };
            let Some(pool_branch) = branches
                .iter()
                .find(|b| matches!(self.kind_of(b.head()), Some(LayerKind::Pool(_))))
            else {
                return;
            };
            let hosts = self.tensor_hosts(&branches);
            // largest kernel first, earlier branch on ties
            let Some((_, host, _)) = hosts
                .iter()
                .max_by(|a, b| a.2.product().cmp(&b.2.product()).then(b.0.cmp(&a.0)))
                .cloned()
            else {
                return;
            };
            let ids: Vec<String> = pool_branch.nodes.clone();
            let head = pool_branch.head().to_string();
            let ids_ref: Vec<&str> = ids.iter().map(String::as_str).collect();
            if !self.attempt(PassKind::SlimNonTensorBranch, &head, |g| slim_nontensor_branch(g, &ids_ref, &host)) {
                return;
            }
        }
    }

    fn tensor(&mut self, concat: &str) {
        let Ok(branches) = self.module_branches(concat) else {
            return;
        };
        let hosts = self.tensor_hosts(&branches);
        let conv_only = |b: &Branch| {
            b.nodes
                .iter()
                .filter(|id| matches!(self.kind_of(id), Some(LayerKind::Conv(_))))
                .count()
                == 1
        };
        // the single-conv branch with the smallest kernel is absorbed
        let Some((small_idx, small_conv, small_k)) = hosts
            .iter()
            .filter(|(i, _, _)| conv_only(&branches[*i]))
            .min_by(|a, b| a.2.product().cmp(&b.2.product()).then(a.0.cmp(&b.0)))
            .cloned()
        else {
            return;
        };
        let Some((_, host, _)) = hosts
            .iter()
            .filter(|(i, _, k)| *i != small_idx && k.h >= small_k.h && k.w >= small_k.w)
            .min_by(|a, b| a.2.product().cmp(&b.2.product()).then(a.0.cmp(&b.0)))
            .cloned()
        else {
            self.skipped.push(Skipped {
                pass: PassKind::SlimTensorBranch,
                at: small_conv,
                reason: "no sibling branch has a large enough kernel".into(),
            });
            return;
        };
        let opts = TensorBranchOptions {
            force: self.opts.force_two_branch,
            channels: self.opts.channel_overrides.get(&host).copied(),
        };
        let ids = branches[small_idx].nodes.clone();
        let ids_ref: Vec<&str> = ids.iter().map(String::as_str).collect();
        self.attempt(PassKind::SlimTensorBranch, &small_conv, |g| {
            slim_tensor_branch(g, &ids_ref, &host, &opts)
        });
    }

    fn reduce(&mut self, concat: &str) {
        let Ok(branches) = self.module_branches(concat) else {
            return;
        };
        for b in &branches {
            let convs: Vec<&String> = b
                .nodes
                .iter()
                .filter(|id| matches!(self.kind_of(id), Some(LayerKind::Conv(_))))
                .collect();
            let [reducer, down] = convs.as_slice() else {
                continue;
            };
            let is_1x1 = self.kind_of(reducer).and_then(|k| k.as_conv().map(|p| p.kernel())) == Some(Hw::new(1, 1));
            let down_k = self.kind_of(down).and_then(|k| k.as_conv().map(|p| p.kernel().product()));
            if !is_1x1 || down_k.unwrap_or(1) <= 1 || *reducer != b.head() {
                continue;
            }
            let ratio = self.opts.bottleneck_ratio;
            match reduce_bottleneck(&self.app.graph, reducer, ratio) {
                Ok(Some((g, rec))) => {
                    if let Err(e) = self.app.accept(g, rec) {
                        self.skip(PassKind::ReduceBottleneck, reducer, e);
                    }
                }
                Ok(None) => {}
                Err(e) => self.skip(PassKind::ReduceBottleneck, reducer, e),
            }
        }
    }

    fn skip(&mut self, pass: PassKind, at: &str, e: SlimError) {
        self.skipped.push(Skipped {
            pass,
            at: at.to_string(),
            reason: e.to_string(),
        });
    }
}

fn is_branch_pass(p: PassKind) -> bool {
    matches!(
        p,
        PassKind::SlimNonTensorBranch | PassKind::SlimTensorBranch | PassKind::ReduceBottleneck | PassKind::MergeParallelConv
    )
}

/// Finds slimmable structures bottom to top and schedules rewrites for them.
///
/// Streamlines are matched at each convolution (`conv -> bn -> scale`, then
/// LRN and the first pooling layer below it through ReLU/dropout) and
/// branch modules at each concat whose inputs start from one activation.
/// Within a module: parallel convs are merged, pooling branches absorbed
/// into the sibling with the largest kernel, the smallest single-conv branch
/// absorbed into the smallest sibling that covers its kernel, then reducers
/// shrunk. Structures that match but cannot be rewritten are listed in
/// [`SlimPlan::skipped`].
pub fn build_slim_plan(g: &ModelGraph, opts: &SlimOptions) -> Result<SlimPlan, SlimError> {
    let order = topo_order(g)?;
    let mut planner = Planner {
        app: Applier::new(g)?,
        opts,
        skipped: Vec::new(),
    };
    for id in &order {
        match planner.kind_of(id) {
            Some(LayerKind::Conv(_)) => planner.streamline(id),
            Some(LayerKind::Concat) => planner.module(id),
            _ => {}
        }
    }
    let mut records = planner.app.records;
    if opts.group_branch_records {
        let mut group = 0;
        let mut open = false;
        for r in records.iter_mut() {
            if is_branch_pass(r.pass) {
                r.group = Some(group);
                open = true;
            } else if open {
                group += 1;
                open = false;
            }
        }
    }
    Ok(SlimPlan {
        records,
        skipped: planner.skipped,
    })
}
