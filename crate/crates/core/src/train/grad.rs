//! Reconstruction loss `(1/B) * sum_i ||conv(X_i) - Y_i||^2` and its
//! gradient via the convolution adjoint.

use crate::kernels::{geometry, gemm, im2col, ConvGeom};
use crate::params::ConvParams;
use crate::tensor::{Real, ShapeError, Tensor4};

/// Loss with gradients laid out like the conv's weights (`O x I x Kh x Kw`)
/// and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Fixed-order dot product with four partial sums.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Patch matrices of every sample of `x` for the geometry of `p`.
pub(crate) struct Patches {
    pub geom: ConvGeom,
    pub samples: Vec<Vec<f64>>,
}

impl Patches {
    pub fn new<T: Real>(p: &ConvParams<T>, x: &Tensor4<T>) -> Result<Self, ShapeError> {
        Self::first(p, x, x.n())
    }

    /// Patches of the first `count` samples only.
    pub fn first<T: Real>(p: &ConvParams<T>, x: &Tensor4<T>, count: usize) -> Result<Self, ShapeError> {
        let geom = geometry(p, x)?;
        let samples = (0..count.min(x.n()))
            .map(|n| {
                let mut v = Vec::new();
                im2col(p, x, n, &geom, &mut v);
                v
            })
            .collect();
        Ok(Patches { geom, samples })
    }
}

/// `W * patches + b` for one sample, each element rounded to `T` as the
/// inference kernel would store it.
pub(crate) fn forward_patches<T: Real>(w: &[f64], b: &[f64], patches: &[f64], geom: &ConvGeom, out: &mut Vec<f64>) {
    let pos = geom.positions();
    out.clear();
    out.resize(geom.out_c * pos, 0.0);
    gemm(geom.out_c, geom.rows, pos, 1.0, w, patches, (pos as isize, 1), 0.0, out);
    for (o, row) in out.chunks_mut(pos.max(1)).enumerate().take(geom.out_c) {
        for a in row.iter_mut() {
            *a = T::from_f64(*a + b[o]).to_f64();
        }
    }
}

/// Adds sample `n`'s squared error to the returned loss and, when `grads`
/// is given, `scale` times its gradient to the accumulators.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate<T: Real>(
    w: &[f64],
    b: &[f64],
    patches: &[f64],
    geom: &ConvGeom,
    y: &Tensor4<T>,
    n: usize,
    scale: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
    out: &mut Vec<f64>,
) -> f64 {
    let pos = geom.positions();
    forward_patches::<T>(w, b, patches, geom, out);
    let covered = y.c();
    let mut loss = 0.0;
    for o in 0..geom.out_c {
        let resid = &mut out[o * pos..(o + 1) * pos];
        if o < covered {
            for (r, t) in resid.iter_mut().zip(y.plane(n, o)) {
                *r -= t.to_f64();
            }
            loss += dot(resid, resid);
        } else {
            // channels past the target's count are unconstrained
            resid.fill(0.0);
        }
    }
    if let Some((dw, db)) = grads {
        gemm(geom.out_c, pos, geom.rows, scale, out, patches, (1, pos as isize), 1.0, dw);
        for (o, d) in db.iter_mut().enumerate() {
            *d += scale * out[o * pos..(o + 1) * pos].iter().sum::<f64>();
        }
    }
    loss
}

pub(crate) fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

/// Loss (and optionally gradients) over the samples `rows` of a patch cache.
pub(crate) fn batch_terms<T: Real>(
    p: &ConvParams<T>,
    cache: &Patches,
    y: &Tensor4<T>,
    rows: &[usize],
    with_grads: bool,
) -> Gradients {
    let w = to_f64(p.weights.data());
    let b = to_f64(&p.bias);
    let mut dw = vec![0f64; if with_grads { w.len() } else { 0 }];
    let mut db = vec![0f64; if with_grads { b.len() } else { 0 }];
    let batch = rows.len();
    let scale = if batch == 0 { 0.0 } else { 2.0 / batch as f64 };
    let mut out = Vec::new();
    let mut loss = 0.0;
    for &n in rows {
        let grads = if with_grads {
            Some((dw.as_mut_slice(), db.as_mut_slice()))
        } else {
            None
        };
        loss += accumulate(&w, &b, &cache.samples[n], &cache.geom, y, n, scale, grads, &mut out);
    }
    Gradients {
        loss: if batch == 0 { 0.0 } else { loss / batch as f64 },
        weights: dw,
        bias: db,
    }
}

pub(crate) fn check_target<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>, geom: &ConvGeom) -> Result<(), ShapeError> {
    if y.n() != x.n() {
        return Err(ShapeError::Mismatch(format!(
            "{} inputs but {} targets",
            x.n(),
            y.n()
        )));
    }
    if (y.h(), y.w()) != (geom.ho, geom.wo) || y.c() > geom.out_c {
        return Err(ShapeError::Mismatch(format!(
            "target maps are {}x{}x{} but the conv produces {}x{}x{}",
            y.c(),
            y.h(),
            y.w(),
            geom.out_c,
            geom.ho,
            geom.wo
        )));
    }
    Ok(())
}

fn run<T: Real>(p: &ConvParams<T>, x: &Tensor4<T>, y: &Tensor4<T>, with_grads: bool) -> Result<Gradients, ShapeError> {
    let cache = Patches::new(p, x)?;
    check_target(x, y, &cache.geom)?;
    let rows: Vec<usize> = (0..x.n()).collect();
    Ok(batch_terms(p, &cache, y, &rows, with_grads))
}

/// Loss and gradients of `p` on the batch `(x, y)`. `y` may have fewer
/// channels than `p` produces; the extra output channels do not contribute.
pub fn loss_and_grads<T: Real>(p: &ConvParams<T>, x: &Tensor4<T>, y: &Tensor4<T>) -> Result<Gradients, ShapeError> {
    run(p, x, y, true)
}

/// The loss alone.
pub fn reconstruction_loss<T: Real>(p: &ConvParams<T>, x: &Tensor4<T>, y: &Tensor4<T>) -> Result<f64, ShapeError> {
    run(p, x, y, false).map(|g| g.loss)
}

/// Largest relative difference between the analytic gradient and central
/// finite differences with step `h`, over every weight and bias.
/// Differences are taken relative to `max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check(p: &ConvParams<f64>, x: &Tensor4<f64>, y: &Tensor4<f64>, h: f64) -> Result<f64, ShapeError> {
    let g = loss_and_grads(p, x, y)?;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst = 0f64;
    let mut probe = p.clone();
    for i in 0..p.weights.len() {
        let w0 = p.weights.data()[i];
        probe.weights.data_mut()[i] = w0 + h;
        let up = reconstruction_loss(&probe, x, y)?;
        probe.weights.data_mut()[i] = w0 - h;
        let down = reconstruction_loss(&probe, x, y)?;
        probe.weights.data_mut()[i] = w0;
        worst = worst.max(rel(g.weights[i], (up - down) / (2.0 * h)));
    }
    for i in 0..p.bias.len() {
        let b0 = p.bias[i];
        probe.bias[i] = b0 + h;
        let up = reconstruction_loss(&probe, x, y)?;
        probe.bias[i] = b0 - h;
        let down = reconstruction_loss(&probe, x, y)?;
        probe.bias[i] = b0;
        worst = worst.max(rel(g.bias[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}
