use candle_core::{Tensor, Var, D};

use super::ops::{reflect_pad, zero_pad};
use super::params::{Init, Scope};
use super::unfold;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

/// Fan-in scaled normal initialization for layers followed by a ReLU-family activation.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: Padding,
    dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: Padding::Zero(0),
            dilation: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(scope: &mut Scope<'_>, spec: ConvSpec) -> Result<Self> {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        Self::with_init(scope, spec, Init::Normal(kaiming_std(fan_in)))
    }

    pub fn with_init(scope: &mut Scope<'_>, spec: ConvSpec, init: Init) -> Result<Self> {
        if spec.stride == 0 || spec.dilation == 0 || spec.kernel == 0 {
            return Err(Error::InvalidConfig("conv stride, dilation and kernel must be positive".into()));
        }
        let weight = scope.param(
            "weight",
            (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
            init,
        )?;
        let bias = if spec.bias {
            Some(scope.param("bias", spec.out_channels, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, self.weight.as_tensor())
    }

    /// Runs the convolution with a substitute kernel of the same shape
    /// (used for spectrally normalized weights).
    pub fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let (x, pad) = match self.padding {
            Padding::Zero(p) => (x.clone(), p),
            Padding::Reflect(p) => (reflect_pad(x, p)?, 0),
        };
        let y = unfold::conv2d(&x, weight, self.stride, pad, self.dilation)?;
        add_channel_bias(&y, self.bias.as_ref())
    }
}

fn add_channel_bias(y: &Tensor, bias: Option<&Var>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
        None => Ok(y.clone()),
    }
}

/// Transposed convolution with zero padding.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = out_channels * kernel * kernel;
        let weight = scope.param(
            "weight",
            (in_channels, out_channels, kernel, kernel),
            Init::Normal(kaiming_std(fan_in)),
        )?;
        let bias = scope.param("bias", out_channels, Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = unfold::conv_transpose2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        add_channel_bias(&y, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, in_features: usize, out_features: usize) -> Result<Self> {
        let std = (1.0 / in_features as f64).sqrt();
        Self::with_init(scope, in_features, out_features, Init::Normal(std), Init::Zeros)
    }

    pub fn with_init(
        scope: &mut Scope<'_>,
        in_features: usize,
        out_features: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        let weight = scope.param("weight", (out_features, in_features), weight)?;
        let bias = scope.param("bias", out_features, bias)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Batch normalization over `(b, h, w)` with affine terms and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("weight", channels, Init::Ones)?,
            beta: scope.param("bias", channels, Init::Zeros)?,
            running_mean: scope.buffer("running_mean", channels, Init::Zeros)?,
            running_var: scope.buffer("running_var", channels, Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn gamma(&self) -> &Var {
        &self.gamma
    }

    /// Batch statistics (and a running-average update) when `train`, running
    /// statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let per_channel = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = per_channel.mean_keepdim(D::Minus1)?;
            let var = per_channel.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.flatten_all()?, var.flatten_all()?)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        let shape = (1, c, 1, 1);
        let scale = (self.gamma.as_tensor() / (var + self.eps)?.sqrt()?)?.reshape(shape)?;
        let y = x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_mul(&scale)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape)?)?;
        Ok(y)
    }
}

/// 3×3 depthwise convolution with zero padding 1, written as a sum of nine
/// shifted, channel-scaled copies of the input.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    weight: Var,
    stride: usize,
}

impl DepthwiseConv3x3 {
    pub fn new(scope: &mut Scope<'_>, channels: usize, stride: usize) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidConfig(format!("depthwise stride must be 1 or 2, got {stride}")));
        }
        let weight = scope.param("weight", (channels, 1, 3, 3), Init::Normal(kaiming_std(9)))?;
        Ok(Self { weight, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let padded = zero_pad(x, 1)?;
        let taps = self.weight.as_tensor().reshape((c, 9))?;
        let mut acc: Option<Tensor> = None;
        for ky in 0..3 {
            for kx in 0..3 {
                let k = taps.narrow(1, ky * 3 + kx, 1)?.reshape((1, c, 1, 1))?;
                let term = padded.narrow(2, ky, h)?.narrow(3, kx, w)?.broadcast_mul(&k)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        let out = acc.expect("nine taps");
        if self.stride == 1 {
            return Ok(out);
        }
        // Stride 2 keeps every other row/column starting at 0.
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let out = zero_pad_br(&out, 2 * h2 - h, 2 * w2 - w)?;
        Ok(out
            .reshape((b, c, h2, 2, w2, 2))?
            .narrow(3, 0, 1)?
            .narrow(5, 0, 1)?
            .reshape((b, c, h2, w2))?)
    }
}

fn zero_pad_br(x: &Tensor, bottom: usize, right: usize) -> Result<Tensor> {
    let x = if bottom > 0 { x.pad_with_zeros(2, 0, bottom)? } else { x.clone() };
    Ok(if right > 0 { x.pad_with_zeros(3, 0, right)? } else { x })
}
