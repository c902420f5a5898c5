use candle_core::{Tensor, Var};

use super::layers::{Conv2d, ConvSpec};
use super::ops::softmax_last;
use super::params::{Init, Scope};
use crate::error::Result;

/// Row-stochastic spatial attention scores from two learned 1×1 projections.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    query: Conv2d,
    key: Conv2d,
}

impl SpatialAttention {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        let inner = (channels / 8).max(1);
        Ok(Self {
            query: Conv2d::new(&mut scope.sub("query"), ConvSpec::new(channels, inner, 1))?,
            key: Conv2d::new(&mut scope.sub("key"), ConvSpec::new(channels, inner, 1))?,
        })
    }

    /// Scores of shape `(b, h·w, h·w)`; row `i` is a distribution over the
    /// positions attended from position `i`.
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let d = q.dim(1)?;
        let q = q.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?;
        let k = k.reshape((b, d, h * w))?.contiguous()?;
        softmax_last(&q.matmul(&k)?)
    }
}

/// `out[:, :, i] = Σ_j scores[i, j] · values[:, :, j]`.
pub fn attend(scores: &Tensor, values: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = values.dims4()?;
    let v = values.reshape((b, c, h * w))?;
    let out = v.matmul(&scores.transpose(1, 2)?.contiguous()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// Single-head self-attention with a residual gate initialized to zero.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    attention: SpatialAttention,
    value: Conv2d,
    gamma: Var,
}

impl SelfAttention {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            attention: SpatialAttention::new(&mut scope.sub("attn"), channels)?,
            value: Conv2d::new(&mut scope.sub("value"), ConvSpec::new(channels, channels, 1))?,
            gamma: scope.param("gamma", 1, Init::Zeros)?,
        })
    }

    pub fn gamma(&self) -> &Var {
        &self.gamma
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let scores = self.attention.scores(x)?;
        let context = attend(&scores, &self.value.forward(x)?)?;
        Ok((x + context.broadcast_mul(&self.gamma.as_tensor().reshape((1, 1, 1, 1))?)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attend_with_uniform_scores_averages() {
        let values = Tensor::arange(0f32, 8., &Device::Cpu).unwrap().reshape((1, 2, 2, 2)).unwrap();
        let scores = Tensor::full(0.25f32, (1, 4, 4), &Device::Cpu).unwrap();
        let out = attend(&scores, &values).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(out, vec![1.5, 1.5, 1.5, 1.5, 5.5, 5.5, 5.5, 5.5]);
    }

    #[test]
    fn zero_gate_is_identity() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sa = SelfAttention::new(&mut store.root(&mut rng), 16).unwrap();
        let x = Tensor::randn(0f32, 1., (2, 16, 4, 4), &Device::Cpu).unwrap();
        let y = sa.forward(&x).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
