//! Training objectives for the landmark-conditioned inpaintor.
//!
//! Images are `(b, 3, h, w)` tensors, masks `(b, 1, h, w)` with `1` in the
//! hole. Every ℓ1 term uses a zero subgradient at zero.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{abs_zero_subgrad, scalar};
use crate::nn::unfold;

/// A fixed feature network mapping an image batch to an ordered list of
/// `(b, N_p, H_p, W_p)` feature stacks.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>>;

    fn layer_names(&self) -> Vec<String>;
}

/// Uses the raw pixels as the single feature stack.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![images.clone()])
    }

    fn layer_names(&self) -> Vec<String> {
        vec!["pixels".into()]
    }
}

/// VGG-19 convolutional trunk returning `relu1_1` … `relu5_1`.
///
/// Weights are read from a safetensors file using the torchvision key layout
/// (`features.{i}.weight` / `features.{i}.bias`).
#[derive(Debug, Clone)]
pub struct Vgg19Extractor {
    // (weight, bias, pool before this conv, tap after this conv)
    layers: Vec<(Tensor, Tensor, bool, Option<&'static str>)>,
    mean: Tensor,
    std: Tensor,
}

const VGG19_CONVS: [(usize, bool, Option<&str>); 13] = [
    (0, false, Some("relu1_1")),
    (2, false, None),
    (5, true, Some("relu2_1")),
    (7, false, None),
    (10, true, Some("relu3_1")),
    (12, false, None),
    (14, false, None),
    (16, false, None),
    (19, true, Some("relu4_1")),
    (21, false, None),
    (23, false, None),
    (25, false, None),
    (28, true, Some("relu5_1")),
];

impl Vgg19Extractor {
    pub fn from_tensors(tensors: &HashMap<String, Tensor>, device: &Device) -> Result<Self> {
        let mut layers = Vec::new();
        for (idx, pool, tap) in VGG19_CONVS {
            let get = |suffix: &str| -> Result<Tensor> {
                let key = format!("features.{idx}.{suffix}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::InvalidConfig(format!("VGG-19 weights lack {key}")))?;
                Ok(t.to_dtype(DType::F32)?.to_device(device)?)
            };
            layers.push((get("weight")?, get("bias")?, pool, tap));
        }
        Ok(Self {
            layers,
            mean: Tensor::new(&[0.485f32, 0.456, 0.406], device)?.reshape((1, 3, 1, 1))?,
            std: Tensor::new(&[0.229f32, 0.224, 0.225], device)?.reshape((1, 3, 1, 1))?,
        })
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path.as_ref(), device)?;
        Self::from_tensors(&tensors, device)
    }
}

impl FeatureExtractor for Vgg19Extractor {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let unit = ((images.to_dtype(DType::F32)? + 1.0)? * 0.5)?;
        let mut h = unit.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut out = Vec::new();
        for (w, b, pool, tap) in &self.layers {
            if *pool {
                h = h.max_pool2d(2)?;
            }
            h = unfold::conv2d(&h, w, 1, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?.relu()?;
            if tap.is_some() {
                out.push(h.clone());
            }
            if out.len() == 5 {
                break;
            }
        }
        Ok(out)
    }

    fn layer_names(&self) -> Vec<String> {
        self.layers.iter().filter_map(|l| l.3.map(String::from)).collect()
    }
}

/// Coefficients of the weighted generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 0.1,
            style: 250.0,
            tv: 0.1,
            adversarial: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.perceptual, self.style, self.tv, self.adversarial];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_mask(images: &Tensor, mask: &Tensor) -> Result<()> {
    let (b, _, h, w) = images.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match images {:?}",
            mask.dims(),
            images.dims()
        )));
    }
    Ok(())
}

/// Whole-frame ℓ1 error divided by the number of hole entries (hole pixels × 3).
pub fn pixel_loss(generated: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape("pixel loss", generated, target)?;
    check_mask(generated, mask)?;
    let total = abs_zero_subgrad(&(generated - target)?)?.sum_all()?;
    let holes = scalar(&mask.sum_all()?)?;
    if holes == 0.0 {
        log::warn!("pixel loss with an empty hole; falling back to the frame mean");
        return Ok((total / generated.elem_count() as f64)?);
    }
    let channels = generated.dim(1)? as f64;
    Ok((total / (holes * channels))?)
}

/// `φᵀφ` per sample: `(b, N, H, W)` features to `(b, N, N)`.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let (b, n, h, w) = features.dims4()?;
    let f = features.reshape((b, n, h * w))?;
    Ok(f.matmul(&f.t()?)?)
}

/// Gram-matrix distance between hole-masked images, summed over feature
/// layers and averaged over the batch.
pub fn style_loss(
    generated: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    extractor: &dyn FeatureExtractor,
) -> Result<Tensor> {
    same_shape("style loss", generated, target)?;
    check_mask(generated, mask)?;
    let gen_feats = extractor.features(&generated.broadcast_mul(mask)?)?;
    let tgt_feats = extractor.features(&target.broadcast_mul(mask)?)?;
    let b = generated.dim(0)? as f64;
    let mut total: Option<Tensor> = None;
    for (fg, ft) in gen_feats.iter().zip(&tgt_feats) {
        let (_, n, h, w) = fg.dims4()?;
        let scale = (n * h * w) as f64;
        let diff = ((gram(fg)? - gram(ft)?)? / scale)?;
        let term = (abs_zero_subgrad(&diff)?.sum_all()? / ((n * n) as f64 * b))?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidValue("feature extractor produced no layers".into()))
}

/// Mean absolute feature difference per layer, summed over layers.
pub fn perceptual_loss(generated: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape("perceptual loss", generated, target)?;
    let gen_feats = extractor.features(generated)?;
    let tgt_feats = extractor.features(target)?;
    let mut total: Option<Tensor> = None;
    for (fg, ft) in gen_feats.iter().zip(&tgt_feats) {
        let term = abs_zero_subgrad(&(fg - ft)?)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidValue("feature extractor produced no layers".into()))
}

/// Forward-difference total variation, summed over channels and divided by
/// the pixel count `H·W`, averaged over the batch.
pub fn tv_loss(image: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = image.dims4()?;
    let mut total = Tensor::zeros((), image.dtype(), image.device())?;
    if w > 1 {
        let dh = (image.narrow(3, 1, w - 1)? - image.narrow(3, 0, w - 1)?)?;
        total = (total + abs_zero_subgrad(&dh)?.sum_all()?)?;
    }
    if h > 1 {
        let dv = (image.narrow(2, 1, h - 1)? - image.narrow(2, 0, h - 1)?)?;
        total = (total + abs_zero_subgrad(&dv)?.sum_all()?)?;
    }
    Ok((total / (b * h * w) as f64)?)
}

/// Least-squares generator term: `mean((D(fake) − 1)²)`.
pub fn adversarial_g_loss(fake_scores: &Tensor) -> Result<Tensor> {
    Ok((fake_scores - 1.0)?.sqr()?.mean_all()?)
}

/// Least-squares discriminator term: `mean(D(fake)²) + mean((D(real) − 1)²)`.
pub fn adversarial_d_loss(fake_scores: &Tensor, real_scores: &Tensor) -> Result<Tensor> {
    Ok((fake_scores.sqr()?.mean_all()? + (real_scores - 1.0)?.sqr()?.mean_all()?)?)
}

/// The five generator loss terms of one step.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub pixel: Tensor,
    pub perceptual: Tensor,
    pub style: Tensor,
    pub tv: Tensor,
    pub adversarial: Tensor,
}

impl LossComponents {
    pub fn values(&self) -> Result<[f64; 5]> {
        Ok([
            scalar(&self.pixel)?,
            scalar(&self.perceptual)?,
            scalar(&self.style)?,
            scalar(&self.tv)?,
            scalar(&self.adversarial)?,
        ])
    }
}

/// `pixel + λ_perc·perc + λ_style·style + λ_tv·tv + λ_adv·adv`; rejects
/// non-finite components.
pub fn total_generator_loss(c: &LossComponents, weights: &LossWeights, step: u64) -> Result<Tensor> {
    let values = c.values()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "pixel={} perceptual={} style={} tv={} adversarial={}",
                values[0], values[1], values[2], values[3], values[4]
            ),
        });
    }
    let total = ((((&c.pixel + (&c.perceptual * weights.perceptual)?)? + (&c.style * weights.style)?)?
        + (&c.tv * weights.tv)?)?
        + (&c.adversarial * weights.adversarial)?)?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(data: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn pixel_loss_single_hole() {
        let target = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let mut g = vec![0.0; 12];
        g[0] = 0.6; // channel 0 at (0, 0)
        let generated = t4(&g, (1, 3, 2, 2));
        let mask = t4(&[1.0, 0.0, 0.0, 0.0], (1, 1, 2, 2));
        assert!((val(&pixel_loss(&generated, &target, &mask).unwrap()) - 0.2).abs() < 1e-12);
        assert_eq!(val(&pixel_loss(&target, &target, &mask).unwrap()), 0.0);
    }

    #[test]
    fn pixel_loss_halves_when_hole_doubles() {
        let target = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let mut g = vec![0.0; 12];
        g[0] = 0.6;
        let generated = t4(&g, (1, 3, 2, 2));
        let one = t4(&[1.0, 0.0, 0.0, 0.0], (1, 1, 2, 2));
        let two = t4(&[1.0, 1.0, 0.0, 0.0], (1, 1, 2, 2));
        let a = val(&pixel_loss(&generated, &target, &one).unwrap());
        let b = val(&pixel_loss(&generated, &target, &two).unwrap());
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_loss_empty_hole_is_frame_mean() {
        let target = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let generated = Tensor::full(0.5f64, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let mask = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!((val(&pixel_loss(&generated, &target, &mask).unwrap()) - 0.5).abs() < 1e-12);
        let bad_mask = Tensor::zeros((1, 1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(pixel_loss(&generated, &target, &bad_mask).is_err());
    }

    #[test]
    fn gram_hand_values() {
        let f = t4(&[1.0, 2.0], (1, 2, 1, 1));
        let g = gram(&f).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(g, vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
        let z = Tensor::zeros((2, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(val(&gram(&z).unwrap().abs().unwrap().sum_all().unwrap()), 0.0);
    }

    #[test]
    fn style_loss_vanishes_without_hole() {
        let a = Tensor::randn(0f64, 0.5, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f64, 0.5, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let zero = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(val(&style_loss(&a, &b, &zero, &IdentityExtractor).unwrap()), 0.0);
        let ones = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(val(&style_loss(&a, &a, &ones, &IdentityExtractor).unwrap()), 0.0);
    }

    #[test]
    fn perceptual_hand_value_and_homogeneity() {
        let a = t4(&[0.3, 0.0, 0.0], (1, 3, 1, 1));
        let b = Tensor::zeros((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap();
        assert!((val(&perceptual_loss(&a, &b, &IdentityExtractor).unwrap()) - 0.1).abs() < 1e-12);
        let x = Tensor::randn(0f64, 0.5, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f64, 0.5, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let base = val(&perceptual_loss(&x, &y, &IdentityExtractor).unwrap());
        let d = (&x - &y).unwrap();
        let scaled = (&y + (d * 2.5).unwrap()).unwrap();
        let s = val(&perceptual_loss(&scaled, &y, &IdentityExtractor).unwrap());
        assert!((s - 2.5 * base).abs() < 1e-12);
    }

    #[test]
    fn tv_hand_values() {
        let img = t4(&[0.0, 1.0, 0.0, 1.0], (1, 1, 2, 2));
        assert!((val(&tv_loss(&img).unwrap()) - 0.5).abs() < 1e-12);
        let flat = Tensor::full(0.3f64, (2, 3, 5, 5), &Device::Cpu).unwrap();
        assert_eq!(val(&tv_loss(&flat).unwrap()), 0.0);
    }

    #[test]
    fn adversarial_constants() {
        let half = Tensor::full(0.5f64, (1, 1, 3, 3), &Device::Cpu).unwrap();
        assert!((val(&adversarial_g_loss(&half).unwrap()) - 0.25).abs() < 1e-12);
        assert!((val(&adversarial_d_loss(&half, &half).unwrap()) - 0.5).abs() < 1e-12);
        let zeros = half.zeros_like().unwrap();
        let ones = half.ones_like().unwrap();
        assert_eq!(val(&adversarial_d_loss(&zeros, &ones).unwrap()), 0.0);
        assert_eq!(val(&adversarial_g_loss(&zeros).unwrap()), 1.0);
    }

    #[test]
    fn generator_gradient_pushes_scores_up() {
        let s = candle_core::Var::new(&[0.2f64, 0.7, 0.95], &Device::Cpu).unwrap();
        let g = adversarial_g_loss(s.as_tensor()).unwrap().backward().unwrap();
        let grad = g.get(&s).unwrap().to_vec1::<f64>().unwrap();
        assert!(grad.iter().all(|&d| d < 0.0));
    }

    fn components(v: [f64; 5]) -> LossComponents {
        let s = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        LossComponents {
            pixel: s(v[0]),
            perceptual: s(v[1]),
            style: s(v[2]),
            tv: s(v[3]),
            adversarial: s(v[4]),
        }
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        assert!((val(&total_generator_loss(&components([1.0; 5]), &w, 0).unwrap()) - 251.21).abs() < 1e-9);
        let zero = LossWeights {
            perceptual: 0.0,
            style: 0.0,
            tv: 0.0,
            adversarial: 0.0,
        };
        assert_eq!(val(&total_generator_loss(&components([0.7, 3.0, 4.0, 5.0, 6.0]), &zero, 0).unwrap()), 0.7);
        // linear in each component
        let base = val(&total_generator_loss(&components([1.0, 2.0, 3.0, 4.0, 5.0]), &w, 0).unwrap());
        let bumped = val(&total_generator_loss(&components([1.0, 2.0, 4.0, 4.0, 5.0]), &w, 0).unwrap());
        assert!((bumped - base - 250.0).abs() < 1e-9);
        let err = total_generator_loss(&components([1.0, f64::NAN, 0.0, 0.0, 0.0]), &w, 7).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 7, .. }));
        assert!(LossWeights { style: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn vgg_requires_all_layers() {
        let mut map = HashMap::new();
        map.insert("features.0.weight".to_string(), Tensor::zeros((64, 3, 3, 3), DType::F32, &Device::Cpu).unwrap());
        assert!(Vgg19Extractor::from_tensors(&map, &Device::Cpu).is_err());
    }

    #[test]
    fn vgg_feature_shapes() {
        let dev = Device::Cpu;
        let widths = [(0, 3, 64), (2, 64, 64), (5, 64, 128), (7, 128, 128), (10, 128, 256), (12, 256, 256), (14, 256, 256), (16, 256, 256), (19, 256, 512), (21, 512, 512), (23, 512, 512), (25, 512, 512), (28, 512, 512)];
        let mut map = HashMap::new();
        for (i, cin, cout) in widths {
            map.insert(format!("features.{i}.weight"), Tensor::randn(0f32, 0.05, (cout, cin, 3, 3), &dev).unwrap());
            map.insert(format!("features.{i}.bias"), Tensor::zeros(cout, DType::F32, &dev).unwrap());
        }
        let vgg = Vgg19Extractor::from_tensors(&map, &dev).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &dev).unwrap();
        let feats = vgg.features(&x).unwrap();
        let dims: Vec<_> = feats.iter().map(|f| f.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 64, 32, 32], vec![1, 128, 16, 16], vec![1, 256, 8, 8], vec![1, 512, 4, 4], vec![1, 512, 2, 2]]);
        assert_eq!(vgg.layer_names(), vec!["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"]);
    }
}
