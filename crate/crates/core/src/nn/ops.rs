//! Differentiable tensor helpers not provided by `candle_core` in the form
//! the networks need.

use candle_core::{DType, Tensor, D};

use crate::error::Result;

fn reflect_indices(n: usize, pad: usize) -> Vec<u32> {
    let n = n as i64;
    (-(pad as i64)..n + pad as i64)
        .map(|i| {
            let j = if i < 0 {
                -i
            } else if i >= n {
                2 * n - 2 - i
            } else {
                i
            };
            j as u32
        })
        .collect()
}

/// Reflection padding over the two spatial dims of a `(b, c, h, w)` tensor.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let ih = Tensor::new(reflect_indices(h, pad), dev)?;
    let iw = Tensor::new(reflect_indices(w, pad), dev)?;
    Ok(x.index_select(&ih, 2)?.index_select(&iw, 3)?)
}

pub fn zero_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    Ok(x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?)
}

/// Per-sample, per-channel normalization without affine terms.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// `1 / (1 + e^{-x})`, written through `tanh` so saturated inputs keep finite gradients.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Elementwise `|x|` whose gradient at zero is zero.
pub fn abs_zero_subgrad(x: &Tensor) -> Result<Tensor> {
    Ok((x * x.sign()?.detach())?)
}

/// Global average pool of `(b, c, h, w)` into `(b, c)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Reads a scalar of any float dtype as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
