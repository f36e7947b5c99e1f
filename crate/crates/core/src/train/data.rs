//! Input/target feature-map pairs for layer regression.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::TrainError;
use crate::fixtures::smooth_images;
use crate::graph::{forward_observed, infer_shapes, run_segment, segment_nodes, GraphError, ModelGraph};
use crate::rng::{derive, uniform_tensor};
use crate::slim::Segment;
use crate::tensor::Tensor4;

/// Rows processed per interpreter call when recording activations.
const CHUNK: usize = 32;

/// Where segment inputs come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InputSource {
    /// Uniform noise in `[-1, 1)` fed straight into the segment.
    Noise,
    /// Smooth synthetic images run through the original network, recording
    /// the activation that enters the segment.
    #[default]
    Smooth,
    /// Rows of this network-input batch (picked by seeded shuffle) run
    /// through the original network.
    Recorded(Tensor4),
}

/// `n` network-input rows drawn from `source`, or `None` for noise.
pub fn traffic(g: &ModelGraph, source: &InputSource, n: usize, seed: u64) -> Result<Option<Tensor4>, TrainError> {
    match source {
        InputSource::Noise => Ok(None),
        InputSource::Smooth => {
            let shape = g.input_shape()?;
            Ok(Some(smooth_images(&mut derive(seed, "traffic"), n, shape)))
        }
        InputSource::Recorded(t) => {
            if t.n() == 0 {
                return Err(TrainError::EmptyDataset);
            }
            let mut order: Vec<usize> = (0..t.n()).collect();
            order.shuffle(&mut derive(seed, "traffic-pick"));
            let rows: Vec<usize> = order.iter().copied().cycle().take(n).collect();
            Ok(Some(gather(t, &rows)))
        }
    }
}

/// Samples `rows` of `t`, in that order.
pub fn gather(t: &Tensor4, rows: &[usize]) -> Tensor4 {
    let mut data = Vec::with_capacity(rows.len() * t.c() * t.h() * t.w());
    for &r in rows {
        data.extend_from_slice(t.sample_slice(r));
    }
    Tensor4::new(rows.len(), t.c(), t.h(), t.w(), data).expect("rows have the source shape")
}

fn row_range(t: &Tensor4, start: usize, end: usize) -> Tensor4 {
    gather(t, &(start..end).collect::<Vec<_>>())
}

fn concat_rows(parts: Vec<Tensor4>) -> Tensor4 {
    let refs: Vec<&Tensor4> = parts.iter().collect();
    Tensor4::stack(&refs).expect("chunks share a shape")
}

/// Activations of `ids` for every row of `x`, computed in chunks so only the
/// requested maps are kept.
pub fn record_activations(
    g: &ModelGraph,
    x: &Tensor4,
    ids: &[&str],
) -> Result<BTreeMap<String, Tensor4>, GraphError> {
    for id in ids {
        g.node(id)?;
    }
    let mut parts: BTreeMap<String, Vec<Tensor4>> = BTreeMap::new();
    for start in (0..x.n()).step_by(CHUNK) {
        let chunk = row_range(x, start, (start + CHUNK).min(x.n()));
        let mut acts = forward_observed(g, &chunk, true, &mut |_, _| {})?;
        for id in ids {
            let act = acts.remove(*id).expect("every node is recorded");
            parts.entry(id.to_string()).or_default().push(act);
        }
    }
    Ok(parts.into_iter().map(|(k, v)| (k, concat_rows(v))).collect())
}

/// The activation id a segment starting at `entry` reads: its sole input, or
/// `entry` itself when it is the graph input.
pub fn segment_source(g: &ModelGraph, entry: &str) -> Result<String, GraphError> {
    let node = g.node(entry)?;
    match node.inputs.as_slice() {
        [] => Ok(entry.to_string()),
        [one] => Ok(one.clone()),
        _ => Err(GraphError::Segment {
            entry: entry.to_string(),
            exit: String::new(),
            reason: "entry node has several inputs".into(),
        }),
    }
}

/// Regression pairs: `inputs` row `i` maps to `targets` row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub inputs: Tensor4,
    pub targets: Tensor4,
    pub segment: Segment,
    pub seed: u64,
}

impl PairDataset {
    pub fn new(inputs: Tensor4, targets: Tensor4, segment: Segment, seed: u64) -> Result<Self, TrainError> {
        if inputs.n() != targets.n() {
            return Err(TrainError::Data(format!(
                "{} inputs but {} targets",
                inputs.n(),
                targets.n()
            )));
        }
        Ok(PairDataset {
            inputs,
            targets,
            segment,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pair(&self, i: usize) -> (Tensor4, Tensor4) {
        (self.inputs.sample(i), self.targets.sample(i))
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor4, Tensor4) {
        (gather(&self.inputs, rows), gather(&self.targets, rows))
    }
}

/// `n` pairs for the segment `entry -> exit` of `g`: inputs from `source`,
/// targets by running the original segment on them.
pub fn sample_pairs(
    g: &ModelGraph,
    segment: &Segment,
    n: usize,
    source: &InputSource,
    seed: u64,
) -> Result<PairDataset, TrainError> {
    segment_nodes(g, &segment.entry, &segment.exit)?;
    let src = segment_source(g, &segment.entry)?;
    let inputs = match traffic(g, source, n, seed)? {
        Some(t) => record_activations(g, &t, &[&src])?.remove(&src).expect("requested"),
        None => {
            let shapes = infer_shapes(g, g.input_shape()?)?;
            let s = shapes[&src];
            uniform_tensor(&mut derive(seed, "pairs-noise"), [n, s.c, s.h, s.w], -1.0, 1.0)
        }
    };
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let chunk = row_range(&inputs, start, (start + CHUNK).min(n));
        parts.push(run_segment(g, &segment.entry, &segment.exit, &chunk)?);
    }
    let targets = if parts.is_empty() {
        run_segment(g, &segment.entry, &segment.exit, &inputs)?
    } else {
        concat_rows(parts)
    };
    PairDataset::new(inputs, targets, segment.clone(), seed)
}
