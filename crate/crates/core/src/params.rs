//! Parameter sets carried by each layer kind.

use serde::{Deserialize, Serialize};

use crate::tensor::{Hw, Real, ShapeError, Tensor4};

/// Convolution weights (`O x I x Kh x Kw`), bias (`O`), stride and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: Hw,
    pub pad: Hw,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weights: Tensor4<T>, bias: Vec<T>, stride: Hw, pad: Hw) -> Result<Self, ShapeError> {
        let p = ConvParams {
            weights,
            bias,
            stride,
            pad,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero weights and bias.
    pub fn zeros(out_c: usize, in_c: usize, kernel: Hw, stride: Hw, pad: Hw) -> Self {
        ConvParams {
            weights: Tensor4::zeros(out_c, in_c, kernel.h, kernel.w),
            bias: vec![T::default(); out_c],
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.n()
    }

    pub fn in_channels(&self) -> usize {
        self.weights.c()
    }

    pub fn kernel(&self) -> Hw {
        Hw::new(self.weights.h(), self.weights.w())
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.bias.len() != self.out_channels() {
            return Err(ShapeError::InvalidParams(format!(
                "conv bias length {} != output channels {}",
                self.bias.len(),
                self.out_channels()
            )));
        }
        if self.weights.h() == 0 || self.weights.w() == 0 {
            return Err(ShapeError::InvalidParams("conv kernel must be at least 1x1".into()));
        }
        if self.stride.h == 0 || self.stride.w == 0 {
            return Err(ShapeError::InvalidParams("conv stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Slice of the weights belonging to output channel `o`.
    pub fn filter(&self, o: usize) -> &[T] {
        self.weights.sample_slice(o)
    }

    pub fn convert<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weights: self.weights.convert(),
            bias: self.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Inference-time batch normalization: running mean and variance per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub const DEFAULT_EPS: f32 = 1e-5;

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.mean.len() != self.var.len() {
            return Err(ShapeError::InvalidParams(format!(
                "batch-norm mean/var lengths differ ({} vs {})",
                self.mean.len(),
                self.var.len()
            )));
        }
        if self.var.iter().any(|v| !(*v >= 0.0)) {
            return Err(ShapeError::InvalidParams(
                "batch-norm variance must be non-negative".into(),
            ));
        }
        // eps = 0 is accepted so fold exactness can be checked without it.
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(ShapeError::InvalidParams("batch-norm eps must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-channel affine transform `gamma * x + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl ScaleParams {
    pub fn identity(channels: usize) -> Self {
        ScaleParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.gamma.len() != self.beta.len() {
            return Err(ShapeError::InvalidParams(format!(
                "scale gamma/beta lengths differ ({} vs {})",
                self.gamma.len(),
                self.beta.len()
            )));
        }
        Ok(())
    }
}

/// Cross-channel local response normalization:
/// `x / (k + alpha / local_size * sum(x^2 over the window))^beta_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    pub local_size: usize,
    pub alpha: f32,
    pub beta_exp: f32,
    pub k: f32,
}

impl LrnParams {
    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.local_size == 0 || self.local_size % 2 == 0 {
            return Err(ShapeError::InvalidParams(format!(
                "LRN local_size must be odd and positive, got {}",
                self.local_size
            )));
        }
        if !(self.k > 0.0) || !(self.alpha >= 0.0) || !self.beta_exp.is_finite() {
            return Err(ShapeError::InvalidParams(
                "LRN requires k > 0, alpha >= 0 and a finite beta".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            local_size: 5,
            alpha: 1e-4,
            beta_exp: 0.75,
            k: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub mode: PoolMode,
    pub kernel: Hw,
    pub stride: Hw,
    pub pad: Hw,
}

impl PoolParams {
    pub fn new(mode: PoolMode, kernel: usize, stride: usize, pad: usize) -> Self {
        PoolParams {
            mode,
            kernel: Hw::square(kernel),
            stride: Hw::square(stride),
            pad: Hw::square(pad),
        }
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.kernel.h == 0 || self.kernel.w == 0 || self.stride.h == 0 || self.stride.w == 0 {
            return Err(ShapeError::InvalidParams(
                "pool kernel and stride must be at least 1".into(),
            ));
        }
        // Every window must overlap the input; see pool2d.
        if self.pad.h >= self.kernel.h || self.pad.w >= self.kernel.w {
            return Err(ShapeError::InvalidParams(format!(
                "pool padding {} must be smaller than the kernel {}",
                self.pad, self.kernel
            )));
        }
        Ok(())
    }
}

/// Fully connected layer over the flattened `c*h*w` input.
#[derive(Debug, Clone, PartialEq)]
pub struct FcParams {
    pub out_features: usize,
    pub in_features: usize,
    /// Row-major `out_features x in_features`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl FcParams {
    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.weights.len() != self.out_features * self.in_features
            || self.bias.len() != self.out_features
        {
            return Err(ShapeError::InvalidParams(format!(
                "inner-product expects {}x{} weights and {} biases, got {} and {}",
                self.out_features,
                self.in_features,
                self.out_features,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}
