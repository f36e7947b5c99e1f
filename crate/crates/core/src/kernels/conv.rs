use std::ops::Range;

use crate::params::ConvParams;
use crate::tensor::{checked_extent, Real, ShapeError, Tensor4};

/// Output positions `o` in `0..out_len` whose tap `o * stride + offset - pad`
/// lands inside `0..in_len`.
#[inline]
pub(crate) fn valid_range(
    out_len: usize,
    in_len: usize,
    offset: usize,
    stride: usize,
    pad: usize,
) -> Range<usize> {
    // lowest o with o*stride + offset >= pad
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    // highest o with o*stride + offset - pad <= in_len - 1
    if in_len + pad <= offset {
        return 0..0;
    }
    let hi = (in_len - 1 + pad - offset) / stride + 1;
    lo.min(out_len)..hi.min(out_len)
}

/// Output spatial extents of `p` applied to an `h x w` input.
pub fn conv_out_hw<T: Real>(p: &ConvParams<T>, h: usize, w: usize) -> Result<(usize, usize), ShapeError> {
    let k = p.kernel();
    Ok((
        checked_extent("height", h, k.h, p.stride.h, p.pad.h)?,
        checked_extent("width", w, k.w, p.stride.w, p.pad.w)?,
    ))
}

/// Geometry shared by the forward and adjoint passes.
pub(crate) struct ConvGeom {
    pub out_c: usize,
    pub rows: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn geometry<T: Real>(p: &ConvParams<T>, x: &Tensor4<T>) -> Result<ConvGeom, ShapeError> {
    p.validate()?;
    if x.c() != p.in_channels() {
        return Err(ShapeError::ChannelMismatch {
            expected: p.in_channels(),
            got: x.c(),
        });
    }
    let (ho, wo) = conv_out_hw(p, x.h(), x.w())?;
    let k = p.kernel();
    Ok(ConvGeom {
        out_c: p.out_channels(),
        rows: p.in_channels() * k.h * k.w,
        ho,
        wo,
    })
}

/// Patch matrix of sample `n`: one row per (input channel, ky, kx), one
/// column per output position, zeros where the tap falls in the padding.
pub(crate) fn im2col<T: Real>(p: &ConvParams<T>, x: &Tensor4<T>, n: usize, geom: &ConvGeom, out: &mut Vec<f64>) {
    let k = p.kernel();
    let (sh, sw, ph, pw) = (p.stride.h, p.stride.w, p.pad.h, p.pad.w);
    let (h, w) = (x.h(), x.w());
    let (ho, wo) = (geom.ho, geom.wo);
    out.clear();
    out.resize(geom.rows * ho * wo, 0.0);
    for i in 0..x.c() {
        let plane = x.plane(n, i);
        for ky in 0..k.h {
            let rows = valid_range(ho, h, ky, sh, ph);
            for kx in 0..k.w {
                let r = (i * k.h + ky) * k.w + kx;
                let dst = &mut out[r * ho * wo..(r + 1) * ho * wo];
                let cols = valid_range(wo, w, kx, sw, pw);
                for oy in rows.clone() {
                    let iy = oy * sh + ky - ph;
                    for ox in cols.clone() {
                        dst[oy * wo + ox] = plane[iy * w + ox * sw + kx - pw].to_f64();
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * a(m x k) * b(k x n) + beta * c`, where `b` may be
/// given transposed through its strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], b_strides: (isize, isize), beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by these dimensions
    // and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution with zero padding, lowered to a patch matrix product per
/// sample. Products are summed in `f64`; the bias is added last and each
/// output is rounded once on store.
pub fn conv2d(x: &Tensor4, p: &ConvParams) -> Result<Tensor4, ShapeError> {
    conv_forward(x, p)
}

pub(crate) fn conv_forward<T: Real>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>, ShapeError> {
    let geom = geometry(p, x)?;
    let (n, oc, pos) = (x.n(), geom.out_c, geom.positions());
    let w: Vec<f64> = p.weights.data().iter().map(|v| v.to_f64()).collect();
    let mut out = Vec::with_capacity(n * oc * pos);
    let mut patches = Vec::new();
    let mut acc = vec![0f64; oc * pos];
    for b in 0..n {
        im2col(p, x, b, &geom, &mut patches);
        gemm(oc, geom.rows, pos, 1.0, &w, &patches, (pos as isize, 1), 0.0, &mut acc);
        for o in 0..oc {
            let bias = p.bias[o].to_f64();
            out.extend(acc[o * pos..(o + 1) * pos].iter().map(|&a| T::from_f64(a + bias)));
        }
    }
    Tensor4::new(n, oc, geom.ho, geom.wo, out)
}
