//! Regenerating every slim layer a plan left approximate.

use std::collections::BTreeMap;

use rand::RngCore;

use super::data::{record_activations, traffic, InputSource, PairDataset};
use super::init::xavier_conv;
use super::sgd::{sgd_fit, FitReport, TrainConfig};
use super::TrainError;
use crate::graph::{infer_shapes, topo_order, LayerKind, ModelGraph};
use crate::rng::derive;
use crate::slim::{RewriteRecord, Segment, TargetPiece};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub train: TrainConfig,
    /// Regression pairs per layer.
    pub samples: usize,
    pub source: InputSource,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            train: TrainConfig::default(),
            samples: 256,
            source: InputSource::Smooth,
        }
    }
}

/// One layer to regenerate, taken from the last record naming it.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrainJob {
    pub layer: String,
    pub target: Vec<TargetPiece>,
    pub segment: Segment,
    pub group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobReport {
    pub layer: String,
    pub target: Vec<TargetPiece>,
    pub fit: FitReport,
}

#[derive(Debug)]
pub struct FinetuneFailure {
    pub layer: String,
    pub error: TrainError,
    /// Reports of the layers fitted before the failure.
    pub reports: Vec<JobReport>,
    /// The slim graph with those layers installed.
    pub partial: ModelGraph,
}

/// Layers the records ask to regenerate, bottom to top in `slim`.
pub fn retrain_jobs(slim: &ModelGraph, records: &[RewriteRecord]) -> Result<Vec<RetrainJob>, TrainError> {
    let mut latest: BTreeMap<&str, RetrainJob> = BTreeMap::new();
    for rec in records.iter().filter(|r| r.needs_retrain) {
        for spec in &rec.retrain {
            latest.insert(
                &spec.layer,
                RetrainJob {
                    layer: spec.layer.clone(),
                    target: spec.target.clone(),
                    segment: rec.segment.clone(),
                    group: rec.group,
                },
            );
        }
    }
    let order = topo_order(slim)?;
    let mut jobs = Vec::with_capacity(latest.len());
    for id in &order {
        if let Some(job) = latest.remove(id.as_str()) {
            jobs.push(job);
        }
    }
    if let Some(missing) = latest.keys().next() {
        return Err(TrainError::Job {
            layer: missing.to_string(),
            reason: "not present in the slim model".into(),
        });
    }
    Ok(jobs)
}

fn target_maps(job: &RetrainJob, acts: &BTreeMap<String, Tensor4>) -> Result<Tensor4, TrainError> {
    let mut parts = Vec::with_capacity(job.target.len());
    for piece in &job.target {
        let act = &acts[&piece.node];
        parts.push(match &piece.channels {
            None => act.clone(),
            Some(cs) => act.select_channels(cs).map_err(|e| TrainError::Job {
                layer: job.layer.clone(),
                reason: format!("target '{}': {e}", piece.node),
            })?,
        });
    }
    crate::kernels::concat_channels(&parts.iter().collect::<Vec<_>>()).map_err(|e| TrainError::Job {
        layer: job.layer.clone(),
        reason: format!("target pieces do not line up: {e}"),
    })
}

fn fit_job(
    slim: &ModelGraph,
    job: &RetrainJob,
    input: &Tensor4,
    original_acts: &BTreeMap<String, Tensor4>,
    opts: &FinetuneOptions,
) -> Result<(crate::params::ConvParams, FitReport), TrainError> {
    let node = slim.node(&job.layer)?;
    let LayerKind::Conv(current) = &node.kind else {
        return Err(TrainError::Job {
            layer: job.layer.clone(),
            reason: format!("is a {} layer, not a convolution", node.kind.name()),
        });
    };
    let [source] = node.inputs.as_slice() else {
        return Err(TrainError::Job {
            layer: job.layer.clone(),
            reason: "convolution must have exactly one input".into(),
        });
    };
    // grouped layers learn from the original network's activations when the
    // input still exists there unchanged
    let shapes = infer_shapes(slim, slim.input_shape()?)?;
    let s = shapes[source];
    let from_original = job.group.is_some()
        && original_acts.get(source).is_some_and(|a| (a.c(), a.h(), a.w()) == (s.c, s.h, s.w));
    let x = if from_original {
        original_acts[source].clone()
    } else {
        record_activations(slim, input, &[source])?.remove(source).expect("requested")
    };
    let y = target_maps(job, original_acts)?;
    let data = PairDataset::new(x, y, job.segment.clone(), opts.train.seed)?;
    let k = current.kernel();
    let init = xavier_conv(
        [current.out_channels(), current.in_channels(), k.h, k.w],
        current.stride,
        current.pad,
        sub_seed(opts.train.seed, &format!("xavier/{}", job.layer)),
    );
    let mut config = opts.train.clone();
    config.seed = sub_seed(opts.train.seed, &format!("sgd/{}", job.layer));
    sgd_fit(&data, &init, &config)
}

fn sub_seed(seed: u64, label: &str) -> u64 {
    derive(seed, label).next_u64()
}

/// Regenerates every layer named by a retraining record, bottom to top.
/// Each layer starts from Xavier weights and is fitted so its output on the
/// current slim network's activations matches the original network's
/// feature maps; the fitted weights are installed before the next layer.
pub fn finetune_records(
    original: &ModelGraph,
    slim: &ModelGraph,
    records: &[RewriteRecord],
    opts: &FinetuneOptions,
) -> Result<(ModelGraph, Vec<JobReport>), Box<FinetuneFailure>> {
    let fail = |layer: &str, error: TrainError, reports: Vec<JobReport>, partial: ModelGraph| {
        Box::new(FinetuneFailure {
            layer: layer.to_string(),
            error,
            reports,
            partial,
        })
    };
    let mut g = slim.clone();
    let jobs = retrain_jobs(slim, records).map_err(|e| fail("", e, Vec::new(), g.clone()))?;
    if jobs.is_empty() {
        return Ok((g, Vec::new()));
    }
    if let Err(e) = opts.train.validate() {
        return Err(fail("", e, Vec::new(), g));
    }
    let input = match traffic(original, &opts.source, opts.samples, opts.train.seed) {
        Ok(Some(t)) => t,
        Ok(None) => {
            // noise is drawn at the network input for whole-network fitting
            let s = original.input_shape().map_err(|e| fail("", e.into(), Vec::new(), g.clone()))?;
            crate::rng::uniform_tensor(
                &mut derive(opts.train.seed, "finetune-noise"),
                [opts.samples, s.c, s.h, s.w],
                -1.0,
                1.0,
            )
        }
        Err(e) => return Err(fail("", e, Vec::new(), g)),
    };
    let mut wanted: Vec<&str> = jobs.iter().flat_map(|j| j.target.iter().map(|p| p.node.as_str())).collect();
    for j in &jobs {
        if let Ok(n) = g.node(&j.layer) {
            if let Some(src) = n.inputs.first() {
                if original.contains(src) {
                    wanted.push(src);
                }
            }
        }
    }
    wanted.sort_unstable();
    wanted.dedup();
    let original_acts = record_activations(original, &input, &wanted).map_err(|e| fail("", e.into(), Vec::new(), g.clone()))?;

    let mut reports = Vec::with_capacity(jobs.len());
    for job in &jobs {
        match fit_job(&g, job, &input, &original_acts, opts) {
            Ok((params, fit)) => {
                g.node_mut(&job.layer).expect("checked by fit_job").kind = LayerKind::Conv(params);
                reports.push(JobReport {
                    layer: job.layer.clone(),
                    target: job.target.clone(),
                    fit,
                });
            }
            Err(e) => return Err(fail(&job.layer, e, reports, g)),
        }
    }
    Ok((g, reports))
}
