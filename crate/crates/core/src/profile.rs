//! Per-layer latency of the reference interpreter.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{forward_observed, Chw, GraphError, LayerKind, ModelGraph};
use crate::rng::{derive, uniform_tensor};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("at least one timed run is required")]
    NoRuns,
    #[error("total time is zero; the non-tensor fraction is undefined")]
    ZeroTotal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTiming {
    pub id: String,
    pub kind: String,
    pub is_tensor: bool,
    pub best_ms: f64,
}

/// Times of the fastest of `runs` forwards. Per-layer times all come from
/// that one run, so they add up to `total_ms`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub layers: Vec<LayerTiming>,
    pub total_ms: f64,
    pub runs: usize,
    pub seed: u64,
}

fn ms(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1e6
}

/// Runs one untimed warm-up forward, then `runs` timed forwards of a single
/// seeded input in `[-1, 1)`, keeping the run with the smallest total.
/// Input nodes are not reported.
pub fn time_forward(g: &ModelGraph, input: Chw, runs: usize, seed: u64) -> Result<LatencyReport, ProfileError> {
    if runs == 0 {
        return Err(ProfileError::NoRuns);
    }
    let x = uniform_tensor(&mut derive(seed, "profile-input"), [1, input.c, input.h, input.w], -1.0, 1.0);
    forward_observed(g, &x, false, &mut |_, _| {})?;
    let mut best: Option<(Duration, Vec<(String, Duration)>)> = None;
    for _ in 0..runs {
        let mut times = Vec::with_capacity(g.len());
        forward_observed(g, &x, false, &mut |id, d| times.push((id.to_string(), d)))?;
        let total: Duration = times.iter().map(|(_, d)| *d).sum();
        if best.as_ref().is_none_or(|(t, _)| total < *t) {
            best = Some((total, times));
        }
    }
    let (_, times) = best.expect("runs > 0");
    let mut layers = Vec::with_capacity(times.len());
    for (id, d) in times {
        let kind = &g.node(&id)?.kind;
        if matches!(kind, LayerKind::Input(_)) {
            continue;
        }
        layers.push(LayerTiming {
            id,
            kind: kind.name().to_string(),
            is_tensor: kind.is_tensor(),
            best_ms: ms(d),
        });
    }
    let total_ms = layers.iter().map(|l| l.best_ms).sum();
    Ok(LatencyReport {
        layers,
        total_ms,
        runs,
        seed,
    })
}

impl LatencyReport {
    pub fn tensor_ms(&self) -> f64 {
        self.layers.iter().filter(|l| l.is_tensor).map(|l| l.best_ms).sum()
    }

    pub fn nontensor_ms(&self) -> f64 {
        self.layers.iter().filter(|l| !l.is_tensor).map(|l| l.best_ms).sum()
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# latency report: runs={} seed={}", self.runs, self.seed);
        let width = self.layers.iter().map(|l| l.id.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(s, "{:<width$}  {:<12}  {:<6}  {:>10}", "layer", "kind", "tensor", "best_ms");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<width$}  {:<12}  {:<6}  {:>10.3}",
                l.id,
                l.kind,
                if l.is_tensor { "yes" } else { "no" },
                l.best_ms
            );
        }
        let _ = writeln!(s, "{:<width$}  {:<12}  {:<6}  {:>10.3}", "total", "", "", self.total_ms);
        let _ = writeln!(s, "tensor_ms {:.3}", self.tensor_ms());
        let _ = writeln!(s, "nontensor_ms {:.3}", self.nontensor_ms());
        match nontensor_fraction(self) {
            Ok(f) => {
                let _ = writeln!(s, "nontensor_fraction {f:.4}");
            }
            Err(e) => {
                let _ = writeln!(s, "nontensor_fraction undefined ({e})");
            }
        }
        s
    }

    /// `id,kind,is_tensor,best_ms` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,kind,is_tensor,best_ms\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{:.3}", l.id, l.kind, l.is_tensor, l.best_ms);
        }
        s
    }
}

/// Share of the total spent in non-tensor layers.
pub fn nontensor_fraction(r: &LatencyReport) -> Result<f64, ProfileError> {
    if r.total_ms <= 0.0 {
        return Err(ProfileError::ZeroTotal);
    }
    Ok((r.nontensor_ms() / r.total_ms).clamp(0.0, 1.0))
}

fn ratio(before: f64, after: f64) -> String {
    if after > 0.0 {
        format!("({:.2}x)", before / after)
    } else {
        "(-)".to_string()
    }
}

/// Side-by-side per-layer table. Layers missing after slimming are shown
/// as `merged` (tensor layers) or `removed`; layers only present after as
/// `new`.
pub fn speedup_report(before: &LatencyReport, after: &LatencyReport) -> String {
    let after_by_id: BTreeMap<&str, &LayerTiming> = after.layers.iter().map(|l| (l.id.as_str(), l)).collect();
    let before_ids: BTreeMap<&str, ()> = before.layers.iter().map(|l| (l.id.as_str(), ())).collect();
    let width = before
        .layers
        .iter()
        .chain(&after.layers)
        .map(|l| l.id.len())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>10}  {:>10}  {:>10}", "layer", "before_ms", "after_ms", "speed-up");
    for l in &before.layers {
        match after_by_id.get(l.id.as_str()) {
            Some(a) => {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:>10.3}  {:>10.3}  {:>10}",
                    l.id,
                    l.best_ms,
                    a.best_ms,
                    ratio(l.best_ms, a.best_ms)
                );
            }
            None => {
                let tag = if l.is_tensor { "merged" } else { "removed" };
                let _ = writeln!(s, "{:<width$}  {:>10.3}  {:>10}  {:>10}", l.id, l.best_ms, tag, "");
            }
        }
    }
    for a in after.layers.iter().filter(|a| !before_ids.contains_key(a.id.as_str())) {
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>10.3}  {:>10}", a.id, "new", a.best_ms, "");
    }
    let _ = writeln!(
        s,
        "{:<width$}  {:>10.3}  {:>10.3}  {:>10}",
        "Total",
        before.total_ms,
        after.total_ms,
        ratio(before.total_ms, after.total_ms)
    );
    s
}
