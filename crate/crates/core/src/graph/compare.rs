use super::{run_forward_outputs, GraphError, ModelGraph};
use crate::rng::{seeded, uniform_tensor};
use crate::tensor::Tensor4;

/// Output agreement between two models over a set of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub n_inputs: usize,
    pub max_abs_diff: f64,
    /// Fraction of inputs whose first-output argmax matches.
    pub top1_agreement: f64,
    pub tolerance: f64,
}

impl DivergenceReport {
    pub fn within_tolerance(&self) -> bool {
        self.max_abs_diff <= self.tolerance
    }
}

impl std::fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "inputs          {}", self.n_inputs)?;
        writeln!(f, "max |diff|      {:.6e}", self.max_abs_diff)?;
        writeln!(f, "tolerance       {:.6e}", self.tolerance)?;
        writeln!(f, "top-1 agreement {:.2}%", self.top1_agreement * 100.0)
    }
}

/// Index of the largest element of each sample (first one on ties).
pub fn top1(t: &Tensor4) -> Vec<usize> {
    (0..t.n())
        .map(|b| {
            let s = t.sample_slice(b);
            let mut best = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

const BATCH: usize = 32;

/// Compares the first outputs of `a` and `b` on `n_inputs` inputs drawn
/// uniformly from [-1, 1] with `seed`.
pub fn compare_models(
    a: &ModelGraph,
    b: &ModelGraph,
    n_inputs: usize,
    seed: u64,
    tol: f64,
) -> Result<DivergenceReport, GraphError> {
    let shape = a.input_shape()?;
    let mut rng = seeded(seed);
    let inputs: Vec<Tensor4> = (0..n_inputs.div_ceil(BATCH))
        .map(|i| {
            let n = BATCH.min(n_inputs - i * BATCH);
            uniform_tensor(&mut rng, [n, shape.c, shape.h, shape.w], -1.0, 1.0)
        })
        .collect();
    compare_models_on(a, b, &inputs, tol)
}

/// Compares the first outputs of `a` and `b` on the given input batches.
pub fn compare_models_on(
    a: &ModelGraph,
    b: &ModelGraph,
    batches: &[Tensor4],
    tol: f64,
) -> Result<DivergenceReport, GraphError> {
    let (sa, sb) = (a.input_shape()?, b.input_shape()?);
    if sa != sb {
        return Err(GraphError::Incomparable(format!("input shapes {sa} and {sb}")));
    }
    let mut max_abs_diff = 0f64;
    let mut agree = 0usize;
    let mut total = 0usize;
    for x in batches {
        let ya = run_forward_outputs(a, x)?.swap_remove(0);
        let yb = run_forward_outputs(b, x)?.swap_remove(0);
        let diff = ya.max_abs_diff(&yb).ok_or_else(|| {
            GraphError::Incomparable(format!("output shapes {:?} and {:?}", ya.dims(), yb.dims()))
        })?;
        max_abs_diff = max_abs_diff.max(diff);
        agree += top1(&ya).iter().zip(top1(&yb)).filter(|(p, q)| **p == *q).count();
        total += x.n();
    }
    Ok(DivergenceReport {
        n_inputs: total,
        max_abs_diff,
        top1_agreement: if total == 0 { 1.0 } else { agree as f64 / total as f64 },
        tolerance: tol,
    })
}
