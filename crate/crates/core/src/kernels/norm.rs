use crate::params::{BnParams, LrnParams, ScaleParams};
use crate::tensor::{ShapeError, Tensor4};

fn check_channels(x: &Tensor4, expected: usize) -> Result<(), ShapeError> {
    if x.c() != expected {
        return Err(ShapeError::ChannelMismatch {
            expected,
            got: x.c(),
        });
    }
    Ok(())
}

/// Applies `f(channel, value)` to every element.
fn per_channel(x: &Tensor4, f: impl Fn(usize, f32) -> f32) -> Tensor4 {
    let plane = x.h() * x.w();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % x.c().max(1);
        *v = f(c, *v);
    }
    out
}

/// `(x - mean) / sqrt(var + eps)` per channel, using running statistics.
pub fn batch_norm(x: &Tensor4, p: &BnParams) -> Result<Tensor4, ShapeError> {
    p.validate()?;
    check_channels(x, p.channels())?;
    let inv: Vec<f64> = p
        .var
        .iter()
        .map(|&v| 1.0 / (v as f64 + p.eps as f64).sqrt())
        .collect();
    Ok(per_channel(x, |c, v| {
        ((v as f64 - p.mean[c] as f64) * inv[c]) as f32
    }))
}

/// `gamma * x + beta` per channel.
pub fn scale(x: &Tensor4, p: &ScaleParams) -> Result<Tensor4, ShapeError> {
    p.validate()?;
    check_channels(x, p.channels())?;
    Ok(per_channel(x, |c, v| {
        (p.gamma[c] as f64 * v as f64 + p.beta[c] as f64) as f32
    }))
}

/// Cross-channel LRN with the window clipped at the channel boundaries.
pub fn lrn(x: &Tensor4, p: &LrnParams) -> Result<Tensor4, ShapeError> {
    p.validate()?;
    let half = p.local_size / 2;
    let coeff = p.alpha as f64 / p.local_size as f64;
    let (k, beta) = (p.k as f64, p.beta_exp as f64);
    let (c, plane) = (x.c(), x.h() * x.w());
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..x.n() {
        let base = b * c * plane;
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            for pos in 0..plane {
                let mut sq = 0f64;
                for cc in lo..=hi {
                    let v = src[base + cc * plane + pos] as f64;
                    sq += v * v;
                }
                let idx = base + ch * plane + pos;
                dst[idx] = (src[idx] as f64 / (k + coeff * sq).powf(beta)) as f32;
            }
        }
    }
    Ok(out)
}
