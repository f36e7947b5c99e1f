//! Dense NCHW tensors.

use std::fmt::Debug;

use thiserror::Error;

/// Shape violations raised by kernels and shape inference.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error(
        "non-positive output extent on the {axis} axis (input {input}, kernel {kernel}, stride {stride}, pad {pad})"
    )]
    NonPositiveExtent {
        axis: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    #[error("data length {len} does not match {n}x{c}x{h}x{w}")]
    DataLength {
        len: usize,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Scalar types the numeric kernels are generic over.
///
/// Accumulation always happens in `f64`; `f32` is the production element
/// type and `f64` exists for gradient checking.
pub trait Real: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// A (height, width) pair used for kernels, strides and paddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Hw {
    pub h: usize,
    pub w: usize,
}

impl Hw {
    pub const fn new(h: usize, w: usize) -> Self {
        Hw { h, w }
    }

    pub const fn square(v: usize) -> Self {
        Hw { h: v, w: v }
    }

    pub fn product(self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Hw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// Output extent under the floor rule `floor((in + 2*pad - k) / stride) + 1`.
///
/// Returns `None` when the padded input is smaller than the kernel or the
/// stride is zero.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn checked_extent(
    axis: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize, ShapeError> {
    out_extent(input, kernel, stride, pad).ok_or(ShapeError::NonPositiveExtent {
        axis,
        input,
        kernel,
        stride,
        pad,
    })
}

/// Dense 4-D array in row-major NCHW order.
///
/// Convolution weights reuse the same container with the axes read as
/// (out channels, in channels, kernel rows, kernel cols).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        if data.len() != n * c * h * w {
            return Err(ShapeError::DataLength {
                len: data.len(),
                n,
                c,
                h,
                w,
            });
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::filled(n, c, h, w, T::default())
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: T) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor4 { n, c, h, w, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// One `h*w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + self.h * self.w]
    }

    /// Contiguous `c*h*w` slab of one sample.
    pub fn sample_slice(&self, n: usize) -> &[T] {
        let len = self.c * self.h * self.w;
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies sample `n` out as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor4<T> {
        Tensor4 {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.sample_slice(n).to_vec(),
        }
    }

    /// Stacks tensors along the batch axis. All parts must share `c, h, w`.
    pub fn stack(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>, ShapeError> {
        let first = parts
            .first()
            .ok_or_else(|| ShapeError::Mismatch("cannot stack zero tensors".into()))?;
        let (c, h, w) = (first.c, first.h, first.w);
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.c, p.h, p.w) != (c, h, w) {
                return Err(ShapeError::Mismatch(format!(
                    "cannot stack {}x{}x{} with {}x{}x{}",
                    c, h, w, p.c, p.h, p.w
                )));
            }
            n += p.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Tensor4<T> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    /// Largest absolute element-wise difference; `None` when the shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor4<T>) -> Option<f64> {
        if self.dims() != other.dims() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn convert<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Keeps the listed channels, in the listed order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Tensor4<T>, ShapeError> {
        if let Some(&bad) = channels.iter().find(|&&ch| ch >= self.c) {
            return Err(ShapeError::Mismatch(format!(
                "channel {bad} out of range for {} channels",
                self.c
            )));
        }
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(self.n * channels.len() * plane);
        for b in 0..self.n {
            for &ch in channels {
                data.extend_from_slice(self.plane(b, ch));
            }
        }
        Ok(Tensor4 {
            n: self.n,
            c: channels.len(),
            h: self.h,
            w: self.w,
            data,
        })
    }
}

impl Tensor4<f32> {
    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor4<f32>) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
