//! Momentum SGD on the reconstruction loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::PairDataset;
use super::grad::{batch_terms, check_target, dot, Patches};
use crate::kernels::ConvGeom;
use super::TrainError;
use crate::params::ConvParams;
use crate::rng::derive;

/// How the scheduled learning rate becomes a step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrScaling {
    /// Rescale the schedule so its first step is `1 / lambda`, where
    /// `lambda` is the largest eigenvalue of the loss Hessian estimated by
    /// power iteration on the input patches. Decays still apply, and one
    /// schedule suits layers whose inputs differ in scale.
    #[default]
    Curvature,
    /// Use the scheduled rate as is.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_multiplier_new_layer: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub gamma: f64,
    /// Iterations between decays by `gamma`.
    pub step_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub lr_scaling: LrScaling,
    /// Iterations between full-dataset evaluations for best-seen selection.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            lr_multiplier_new_layer: 10.0,
            momentum: 0.9,
            batch_size: 32,
            gamma: 0.1,
            step_size: 1000,
            max_iters: 3000,
            seed: 0,
            weight_decay: 0.0,
            lr_scaling: LrScaling::Curvature,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.lr_multiplier_new_layer >= 0.0 && self.lr_multiplier_new_layer.is_finite()) {
            return bad("lr_multiplier_new_layer must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if self.step_size == 0 {
            return bad("step_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        Ok(())
    }

    /// Scheduled rate at iteration `iter` (0-based), before curvature scaling.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let decays = (iter / self.step_size).min(i32::MAX as usize) as i32;
        self.base_lr * self.lr_multiplier_new_layer * self.gamma.powi(decays)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Full-dataset loss of the initial parameters.
    pub initial_loss: f64,
    /// Full-dataset loss of the returned parameters.
    pub final_loss: f64,
    /// Mini-batch loss at each iteration, before that iteration's update.
    pub loss_curve: Vec<f64>,
    /// Step size used at each iteration.
    pub lr_curve: Vec<f64>,
    /// Iteration after which the returned parameters were taken (0 = init).
    pub best_iteration: usize,
    /// Largest Hessian eigenvalue estimate, when curvature scaling is on.
    pub curvature: Option<f64>,
    /// Largest relative gradient error, when a check was run.
    pub grad_check: Option<f64>,
}

impl FitReport {
    pub fn iterations(&self) -> usize {
        self.loss_curve.len()
    }

    /// Plain-text table with one row per iteration.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# initial_loss {:.6e}", self.initial_loss);
        let _ = writeln!(s, "# final_loss {:.6e} (after iteration {})", self.final_loss, self.best_iteration);
        if let Some(c) = self.curvature {
            let _ = writeln!(s, "# curvature {c:.6e}");
        }
        if let Some(g) = self.grad_check {
            let _ = writeln!(s, "# grad_check {g:.3e}");
        }
        let _ = writeln!(s, "{:>9} {:>14} {:>14}", "iteration", "lr", "loss");
        for (i, (lr, loss)) in self.lr_curve.iter().zip(&self.loss_curve).enumerate() {
            let _ = writeln!(s, "{:>9} {:>14.6e} {:>14.6e}", i + 1, lr, loss);
        }
        s
    }
}

/// Samples used for the curvature estimate.
const CURVATURE_SAMPLES: usize = 64;
const POWER_STEPS: usize = 30;

/// Largest eigenvalue of the Hessian of the loss with respect to one
/// filter and its bias: `(2/N) * sum over samples and positions of a a^T`
/// with `a = [patch; 1]`.
pub fn curvature(data: &PairDataset, like: &ConvParams) -> Result<f64, TrainError> {
    let cache = Patches::first(like, &data.inputs, CURVATURE_SAMPLES)?;
    Ok(curvature_of(&cache.geom, &cache.samples))
}

fn curvature_of(geom: &ConvGeom, all: &[Vec<f64>]) -> f64 {
    let pos = geom.positions();
    let count = all.len();
    if count == 0 || pos == 0 {
        return 0.0;
    }
    let dim = geom.rows + 1;
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    let mut u = vec![0f64; pos];
    for _ in 0..POWER_STEPS {
        let mut hv = vec![0f64; dim];
        for p in all {
            u.fill(v[geom.rows]);
            for r in 0..geom.rows {
                let vr = v[r];
                for (ui, &pv) in u.iter_mut().zip(&p[r * pos..(r + 1) * pos]) {
                    *ui += vr * pv;
                }
            }
            for (r, h) in hv.iter_mut().take(geom.rows).enumerate() {
                *h += dot(&u, &p[r * pos..(r + 1) * pos]);
            }
            hv[geom.rows] += u.iter().sum::<f64>();
        }
        let scale = 2.0 / count as f64;
        let norm = dot(&hv, &hv).sqrt() * scale;
        if norm == 0.0 || !norm.is_finite() {
            return 0.0;
        }
        lambda = norm;
        for (vi, h) in v.iter_mut().zip(&hv) {
            *vi = h * scale / norm;
        }
    }
    lambda
}

fn apply_update(p: &mut ConvParams, vw: &[f64], vb: &[f64]) {
    for (w, v) in p.weights.data_mut().iter_mut().zip(vw) {
        *w = (*w as f64 + v) as f32;
    }
    for (b, v) in p.bias.iter_mut().zip(vb) {
        *b = (*b as f64 + v) as f32;
    }
}

/// Fits `init` to `data` by momentum SGD and returns the parameters with the
/// lowest full-dataset loss seen (evaluated every `eval_every` iterations
/// and at the end).
pub fn sgd_fit(
    data: &PairDataset,
    init: &ConvParams,
    config: &TrainConfig,
) -> Result<(ConvParams, FitReport), TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cache = Patches::new(init, &data.inputs)?;
    check_target(&data.inputs, &data.targets, &cache.geom)?;
    let everything: Vec<usize> = (0..data.len()).collect();
    let full_loss = |p: &ConvParams| batch_terms(p, &cache, &data.targets, &everything, false).loss;
    let initial_loss = full_loss(init);
    if !initial_loss.is_finite() {
        return Err(TrainError::Diverged { iteration: 0 });
    }
    let lambda = match config.lr_scaling {
        LrScaling::Curvature => {
            let head = cache.samples.len().min(CURVATURE_SAMPLES);
            Some(curvature_of(&cache.geom, &cache.samples[..head]))
        }
        LrScaling::Raw => None,
    };
    let first = config.lr_at(0);
    let step_at = |iter: usize| match lambda {
        // the schedule's shape is kept; its first step becomes 1/lambda
        Some(l) if l > 0.0 && first > 0.0 => config.lr_at(iter) / first / l,
        Some(_) if first == 0.0 => 0.0,
        _ => config.lr_at(iter),
    };

    let mut params = init.clone();
    let mut best = (initial_loss, 0usize, init.clone());
    let mut vw = vec![0f64; params.weights.len()];
    let mut vb = vec![0f64; params.bias.len()];
    let mut loss_curve = Vec::with_capacity(config.max_iters);
    let mut lr_curve = Vec::with_capacity(config.max_iters);
    let mut rng = derive(config.seed, "minibatch");
    let mut order: Vec<usize> = Vec::new();
    let batch = config.batch_size.min(data.len());

    for iter in 0..config.max_iters {
        let mut rows = Vec::with_capacity(batch);
        while rows.len() < batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            rows.push(order.pop().expect("refilled above"));
        }
        let g = batch_terms(&params, &cache, &data.targets, &rows, true);
        if !g.loss.is_finite() {
            return Err(TrainError::Diverged { iteration: iter + 1 });
        }
        let lr = step_at(iter);
        loss_curve.push(g.loss);
        lr_curve.push(lr);
        let wd = config.weight_decay;
        for ((v, gw), w) in vw.iter_mut().zip(&g.weights).zip(params.weights.data()) {
            *v = config.momentum * *v - lr * (gw + wd * *w as f64);
        }
        for (v, gb) in vb.iter_mut().zip(&g.bias) {
            *v = config.momentum * *v - lr * gb;
        }
        apply_update(&mut params, &vw, &vb);
        let done = iter + 1;
        if done % config.eval_every == 0 || done == config.max_iters {
            let l = full_loss(&params);
            if !l.is_finite() {
                return Err(TrainError::Diverged { iteration: done });
            }
            if l < best.0 {
                best = (l, done, params.clone());
            }
        }
    }
    let (final_loss, best_iteration, fitted) = best;
    Ok((
        fitted,
        FitReport {
            initial_loss,
            final_loss,
            loss_curve,
            lr_curve,
            best_iteration,
            curvature: lambda,
            grad_check: None,
        },
    ))
}
