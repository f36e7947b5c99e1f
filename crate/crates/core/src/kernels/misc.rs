use crate::params::FcParams;
use crate::tensor::{ShapeError, Tensor4};

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Softmax across channels at each `(n, y, x)` position.
pub fn softmax_channels(x: &Tensor4) -> Tensor4 {
    let (c, plane) = (x.c(), x.h() * x.w());
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    let mut exps = vec![0f64; c];
    for b in 0..x.n() {
        let base = b * c * plane;
        for pos in 0..plane {
            let max = (0..c)
                .map(|ch| src[base + ch * plane + pos] as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (ch, e) in exps.iter_mut().enumerate() {
                *e = (src[base + ch * plane + pos] as f64 - max).exp();
                sum += *e;
            }
            for (ch, e) in exps.iter().enumerate() {
                dst[base + ch * plane + pos] = (e / sum) as f32;
            }
        }
    }
    out
}

/// Fully connected layer; the output is `n x out_features x 1 x 1`.
pub fn inner_product(x: &Tensor4, p: &FcParams) -> Result<Tensor4, ShapeError> {
    p.validate()?;
    let flat = x.c() * x.h() * x.w();
    if flat != p.in_features {
        return Err(ShapeError::ChannelMismatch {
            expected: p.in_features,
            got: flat,
        });
    }
    let mut out = Vec::with_capacity(x.n() * p.out_features);
    for b in 0..x.n() {
        let input = x.sample_slice(b);
        for o in 0..p.out_features {
            let row = &p.weights[o * flat..(o + 1) * flat];
            let acc: f64 = row.iter().zip(input).map(|(&w, &v)| w as f64 * v as f64).sum();
            out.push((acc + p.bias[o] as f64) as f32);
        }
    }
    Tensor4::new(x.n(), p.out_features, 1, 1, out)
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_channels(xs: &[&Tensor4]) -> Result<Tensor4, ShapeError> {
    let first = xs
        .first()
        .ok_or_else(|| ShapeError::Mismatch("concat needs at least one input".into()))?;
    let (n, h, w) = (first.n(), first.h(), first.w());
    if let Some(bad) = xs.iter().find(|t| (t.n(), t.h(), t.w()) != (n, h, w)) {
        return Err(ShapeError::Mismatch(format!(
            "concat inputs disagree: {}x_x{}x{} vs {}x_x{}x{}",
            n,
            h,
            w,
            bad.n(),
            bad.h(),
            bad.w()
        )));
    }
    let c: usize = xs.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for t in xs {
            data.extend_from_slice(t.sample_slice(b));
        }
    }
    Tensor4::new(n, c, h, w, data)
}

/// Splits along channels into consecutive groups of the given sizes.
pub fn split_channels(x: &Tensor4, sizes: &[usize]) -> Result<Vec<Tensor4>, ShapeError> {
    if sizes.iter().sum::<usize>() != x.c() {
        return Err(ShapeError::Mismatch(format!(
            "split sizes {:?} do not sum to {} channels",
            sizes,
            x.c()
        )));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let chans: Vec<usize> = (start..start + len).collect();
            start += len;
            x.select_channels(&chans)
        })
        .collect()
}
