//! Conditional PatchGAN discriminator with spectrally normalized
//! convolutions and a self-attention block after the second stage.

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{leaky_relu, sigmoid};
use crate::nn::{trace, Conv2d, ConvSpec, Init, ParamStore, Padding, SelfAttention, ShapeTrace};

const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub channels: [usize; 4],
    pub leaky_slope: f64,
    pub use_attention: bool,
    pub use_landmark_channel: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            channels: [64, 128, 256, 512],
            leaky_slope: 0.2,
            use_attention: true,
            use_landmark_channel: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            channels: [16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.use_landmark_channel {
            4
        } else {
            3
        }
    }

    /// Side length of the patch score map.
    pub fn output_size(&self) -> usize {
        // three stride-2 convs, then two stride-1 4×4 convs with padding 1
        self.image_size / 8 - 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::InvalidConfig("discriminator widths must be positive".into()));
        }
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "discriminator image size {} must be a multiple of 8 and at least 32",
                self.image_size
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig("leaky slope must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Result of dividing a weight by its power-iteration spectral norm estimate.
#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    pub normalized: Tensor,
    pub u: Tensor,
    pub sigma: f64,
}

fn unit(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_all()?.sqrt()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    Ok((x / norm.max(SIGMA_FLOOR))?)
}

/// Divides `weight` (viewed as `out × rest`) by the estimate `uᵀ W v` of its
/// top singular value after `iterations` power-iteration steps from `u`.
///
/// The singular vectors are treated as constants, so gradients flow only
/// through `W` and the estimate. A vanishing estimate is floored at `1e-12`.
pub fn spectral_normalize(weight: &Tensor, u: &Tensor, iterations: usize) -> Result<SpectralEstimate> {
    let out = weight.dim(0)?;
    if u.elem_count() != out {
        return Err(Error::ShapeMismatch(format!(
            "power-iteration vector has {} entries, weight has {out} rows",
            u.elem_count()
        )));
    }
    let mat = weight.reshape((out, ()))?;
    let frozen = mat.detach();
    let mut u = u.reshape((out, 1))?.detach();
    let mut v = unit(&frozen.t()?.matmul(&u)?)?;
    for _ in 0..iterations {
        u = unit(&frozen.matmul(&v)?)?;
        v = unit(&frozen.t()?.matmul(&u)?)?;
    }
    let sigma_t = u.t()?.matmul(&mat.matmul(&v)?)?.reshape(())?;
    let sigma = sigma_t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    let normalized = if sigma.abs() < SIGMA_FLOOR {
        (weight / SIGMA_FLOOR)?
    } else {
        weight.broadcast_div(&sigma_t)?
    };
    Ok(SpectralEstimate {
        normalized,
        u: u.flatten_all()?,
        sigma,
    })
}

/// A convolution whose kernel is spectrally normalized before use.
#[derive(Debug, Clone)]
pub struct SnConv2d {
    conv: Conv2d,
    u: Var,
}

impl SnConv2d {
    fn new(scope: &mut crate::nn::Scope<'_>, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv = Conv2d::new(scope, spec)?;
        let init: Vec<f32> = (0..spec.out_channels)
            .map(|_| StandardNormal.sample(rng))
            .collect::<Vec<f64>>()
            .iter()
            .map(|&v| v as f32)
            .collect();
        let norm = init.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        let u = scope.buffer("sn_u", spec.out_channels, Init::Values(init.iter().map(|v| v / norm).collect()))?;
        Ok(Self { conv, u })
    }

    pub fn weight(&self) -> &Var {
        self.conv.weight()
    }

    pub fn u(&self) -> &Var {
        &self.u
    }

    /// One power iteration (stored vector updated) when `update`, otherwise
    /// the stored vector is used as is.
    pub fn normalized_weight(&self, update: bool) -> Result<Tensor> {
        let est = spectral_normalize(self.conv.weight().as_tensor(), self.u.as_tensor(), update as usize)?;
        if update {
            self.u.set(&est.u)?;
        }
        Ok(est.normalized)
    }

    /// Current estimate of the top singular value from the stored vector.
    pub fn sigma_estimate(&self) -> Result<f64> {
        Ok(spectral_normalize(self.conv.weight().as_tensor(), self.u.as_tensor(), 0)?.sigma)
    }

    fn forward(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        self.conv.forward_with_weight(x, weight)
    }
}

/// Parameters θ_D and power-iteration state of the discriminator.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    convs: Vec<SnConv2d>,
    attention: Option<SelfAttention>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let mut root = store.root(&mut rng);
        let [c1, c2, c3, c4] = config.channels;
        let specs = [
            ConvSpec::new(config.input_channels(), c1, 4).stride(2),
            ConvSpec::new(c1, c2, 4).stride(2),
            ConvSpec::new(c2, c3, 4).stride(2),
            ConvSpec::new(c3, c4, 4),
            ConvSpec::new(c4, 1, 4),
        ];
        let convs = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                SnConv2d::new(
                    &mut root.sub(format!("conv{}", i + 1)),
                    s.padding(Padding::Zero(1)).no_bias(),
                    &mut u_rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let attention = if config.use_attention {
            Some(SelfAttention::new(&mut root.sub("attn"), c2)?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            convs,
            attention,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn sn_layers(&self) -> &[SnConv2d] {
        &self.convs
    }

    pub fn attention(&self) -> Option<&SelfAttention> {
        self.attention.as_ref()
    }

    /// Spectrally normalized kernels for all five convolutions.
    pub fn normalized_weights(&self, update: bool) -> Result<Vec<Tensor>> {
        self.convs.iter().map(|c| c.normalized_weight(update)).collect()
    }

    /// Eval-mode scores with frozen power-iteration vectors.
    pub fn forward(&self, image: &Tensor, landmark_map: &Tensor) -> Result<Tensor> {
        let weights = self.normalized_weights(false)?;
        self.forward_with_weights(image, landmark_map, &weights, None)
    }

    /// Patch scores `(b, 1, n, n)` in `(0, 1)` given precomputed kernels.
    pub fn forward_with_weights(
        &self,
        image: &Tensor,
        landmark_map: &Tensor,
        weights: &[Tensor],
        mut tr: Option<&mut ShapeTrace>,
    ) -> Result<Tensor> {
        let (b, c, h, w) = image.dims4()?;
        let s = self.config.image_size;
        if (c, h, w) != (3, s, s) || landmark_map.dims() != [b, 1, s, s] {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects 3x{s}x{s} images with matching landmark maps, got {:?} and {:?}",
                image.dims(),
                landmark_map.dims()
            )));
        }
        let x = if self.config.use_landmark_channel {
            Tensor::cat(&[image, landmark_map], 1)?
        } else {
            image.clone()
        };
        trace(&mut tr, "input", &x);
        let slope = self.config.leaky_slope;
        let mut h = x;
        for (i, (conv, w)) in self.convs.iter().zip(weights).enumerate() {
            h = conv.forward(&h, w)?;
            if i + 1 < self.convs.len() {
                h = leaky_relu(&h, slope)?;
            }
            trace(&mut tr, &format!("conv{}", i + 1), &h);
            if i == 1 {
                if let Some(attn) = &self.attention {
                    h = attn.forward(&h)?;
                    trace(&mut tr, "attention", &h);
                }
            }
        }
        let out = sigmoid(&h)?;
        trace(&mut tr, "output", &out);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::scalar;
    use candle_core::DType;
    use nalgebra::DMatrix;

    fn top_singular(w: &Tensor) -> f64 {
        let rows = w.dim(0).unwrap();
        let m = w.reshape((rows, ())).unwrap().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
        let cols = m[0].len();
        let mat = DMatrix::from_row_iterator(rows, cols, m.into_iter().flatten());
        mat.singular_values().max()
    }

    #[test]
    fn diagonal_weight_normalized_to_unit_norm() {
        let w = Tensor::new(&[[3.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let u = Tensor::new(&[0.6f64, 0.8], &Device::Cpu).unwrap();
        let est = spectral_normalize(&w, &u, 20).unwrap();
        assert!((top_singular(&est.normalized) - 1.0).abs() < 1e-3);
        assert!((est.sigma - 3.0).abs() < 1e-3);
    }

    #[test]
    fn orthogonal_weight_is_unchanged() {
        let (c, s) = (0.6f64, 0.8f64);
        let w = Tensor::new(&[[c, -s], [s, c]], &Device::Cpu).unwrap();
        let u = Tensor::new(&[1.0f64, 0.0], &Device::Cpu).unwrap();
        let est = spectral_normalize(&w, &u, 1).unwrap();
        let diff = scalar(&(est.normalized - &w).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn zero_weight_survives() {
        let w = Tensor::zeros((3, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let u = Tensor::new(&[1.0f32, 0.0, 0.0], &Device::Cpu).unwrap();
        let est = spectral_normalize(&w, &u, 3).unwrap();
        let v = est.normalized.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        assert!(est.u.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|x| x.is_finite()));
        assert!(spectral_normalize(&w, &Tensor::new(&[1.0f32], &Device::Cpu).unwrap(), 1).is_err());
    }

    fn small(size: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size: size,
            ..DiscriminatorConfig::desk()
        }
    }

    #[test]
    fn output_contract() {
        let d = Discriminator::new(small(64), 0, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 0.5, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let l = Tensor::zeros((2, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let mut tr = ShapeTrace::default();
        let w = d.normalized_weights(false).unwrap();
        let y = d.forward_with_weights(&x, &l, &w, Some(&mut tr)).unwrap();
        assert_eq!(y.dims(), &[2, 1, 6, 6]);
        assert_eq!(d.config().output_size(), 6);
        assert_eq!(tr.get("attention"), Some(&[2, 32, 16, 16][..]));
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&s| s > 0.0 && s < 1.0));
        let again = d.forward(&x, &l).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn patch_locality_of_first_cell() {
        // Output cell (0, 0) sees input rows/cols -23..=46; everything from 47
        // on lies outside its receptive field.
        let d = Discriminator::new(small(128), 3, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 0.5, (1, 3, 128, 128), &Device::Cpu).unwrap();
        let l = Tensor::zeros((1, 1, 128, 128), DType::F32, &Device::Cpu).unwrap();
        let mask = Tensor::from_vec(
            (0..128 * 128).map(|i| if i / 128 <= 46 && i % 128 <= 46 { 1f32 } else { 0.0 }).collect::<Vec<_>>(),
            (1, 1, 128, 128),
            &Device::Cpu,
        )
        .unwrap();
        let cropped = x.broadcast_mul(&mask).unwrap();
        let cell = |t: &Tensor| scalar(&d.forward(t, &l).unwrap().get(0).unwrap().get(0).unwrap().get(0).unwrap().get(0).unwrap()).unwrap();
        assert_eq!(cell(&x), cell(&cropped));
        // the corner pixel (46, 46) is inside: changing it moves the score
        let mut bumped = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        bumped[46 * 128 + 46] += 1.0;
        let bumped = Tensor::from_vec(bumped, (1, 3, 128, 128), &Device::Cpu).unwrap();
        assert_ne!(cell(&x), cell(&bumped));
    }

    #[test]
    fn landmark_channel_is_consumed() {
        let d = Discriminator::new(small(64), 5, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 0.5, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let l0 = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let l1 = Tensor::ones((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let a = d.forward(&x, &l0).unwrap();
        let b = d.forward(&x, &l1).unwrap();
        assert!(scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap() > 1e-6);
    }

    #[test]
    fn training_power_iteration_updates_vector() {
        let d = Discriminator::new(small(64), 5, &Device::Cpu).unwrap();
        let before = d.sn_layers()[1].u().as_tensor().to_vec1::<f32>().unwrap();
        d.normalized_weights(true).unwrap();
        let after = d.sn_layers()[1].u().as_tensor().to_vec1::<f32>().unwrap();
        assert_ne!(before, after);
        d.normalized_weights(false).unwrap();
        assert_eq!(after, d.sn_layers()[1].u().as_tensor().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Discriminator::new(small(60), 0, &Device::Cpu).is_err());
        let d = Discriminator::new(small(64), 0, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let l = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(d.forward(&x, &l).is_err());
    }
}
