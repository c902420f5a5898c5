//! Landmark predictor: an inverted-residual (MobileNet-V2 style) backbone
//! whose multi-scale pooled features are fused and regressed to 68 points.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, tensor_to_landmarks, CorruptedImage, LandmarkSet, NUM_LANDMARKS};
use crate::nn::ops::global_avg_pool;
use crate::nn::{trace, BatchNorm2d, Init, Conv2d, ConvSpec, DepthwiseConv3x3, Linear, ParamStore, Padding, Scope, ShapeTrace};

/// One row of the bottleneck table: expansion factor, output channels,
/// repeat count and stride of the first repeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

impl BottleneckSpec {
    pub const fn new(expansion: usize, out_channels: usize, repeats: usize, stride: usize) -> Self {
        Self {
            expansion,
            out_channels,
            repeats,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkNetConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stages: Vec<BottleneckSpec>,
    /// Width of the 1×1 conv producing the C2 features.
    pub head_channels: usize,
    /// Output widths of the S1, S2 and S3 fusion branches.
    pub fusion: [usize; 3],
}

impl Default for LandmarkNetConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            stem_channels: 32,
            stages: vec![
                BottleneckSpec::new(1, 16, 1, 1),
                BottleneckSpec::new(6, 24, 2, 2),
                BottleneckSpec::new(6, 32, 3, 2),
                BottleneckSpec::new(6, 64, 4, 2),
                BottleneckSpec::new(6, 96, 3, 1),
                BottleneckSpec::new(6, 160, 3, 2),
                BottleneckSpec::new(6, 320, 1, 1),
            ],
            head_channels: 1280,
            fusion: [128, 128, 64],
        }
    }
}

impl LandmarkNetConfig {
    /// 64×64 input with every channel width quartered; block structure unchanged.
    pub fn desk() -> Self {
        let full = Self::default();
        Self {
            input_size: 64,
            stem_channels: full.stem_channels / 4,
            stages: full
                .stages
                .iter()
                .map(|s| BottleneckSpec {
                    out_channels: s.out_channels / 4,
                    ..*s
                })
                .collect(),
            head_channels: full.head_channels / 4,
            fusion: full.fusion.map(|c| c / 4),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * NUM_LANDMARKS
    }

    pub fn fusion_dim(&self) -> usize {
        self.fusion.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.stem_channels == 0 || self.head_channels == 0 {
            return Err(Error::InvalidConfig("landmark net sizes must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("landmark net needs at least one stage".into()));
        }
        for s in &self.stages {
            if s.expansion == 0 || s.out_channels == 0 || s.repeats == 0 || !(s.stride == 1 || s.stride == 2) {
                return Err(Error::InvalidConfig(format!("invalid bottleneck spec {s:?}")));
            }
        }
        if self.fusion.contains(&0) {
            return Err(Error::InvalidConfig("fusion widths must be positive".into()));
        }
        Ok(())
    }
}

fn relu6(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x - 6.0)?.relu()?)?)
}

/// Expand (1×1) → depthwise 3×3 → project (1×1), with an identity shortcut
/// when the stride is 1 and the channel count is preserved.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    expand: Option<(Conv2d, BatchNorm2d)>,
    depthwise: DepthwiseConv3x3,
    dw_norm: BatchNorm2d,
    project: Conv2d,
    project_norm: BatchNorm2d,
    residual: bool,
}

impl Bottleneck {
    pub fn new(scope: &mut Scope<'_>, in_channels: usize, out_channels: usize, expansion: usize, stride: usize) -> Result<Self> {
        let hidden = in_channels * expansion;
        let expand = if expansion != 1 {
            Some((
                Conv2d::new(&mut scope.sub("expand"), ConvSpec::new(in_channels, hidden, 1).no_bias())?,
                BatchNorm2d::new(&mut scope.sub("expand_bn"), hidden)?,
            ))
        } else {
            None
        };
        Ok(Self {
            expand,
            depthwise: DepthwiseConv3x3::new(&mut scope.sub("dw"), hidden, stride)?,
            dw_norm: BatchNorm2d::new(&mut scope.sub("dw_bn"), hidden)?,
            project: Conv2d::new(&mut scope.sub("project"), ConvSpec::new(hidden, out_channels, 1).no_bias())?,
            project_norm: BatchNorm2d::new(&mut scope.sub("project_bn"), out_channels)?,
            residual: stride == 1 && in_channels == out_channels,
        })
    }

    pub fn has_residual(&self) -> bool {
        self.residual
    }

    pub fn project(&self) -> &Conv2d {
        &self.project
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        if let Some((conv, bn)) = &self.expand {
            h = relu6(&bn.forward(&conv.forward(&h)?, train)?)?;
        }
        h = relu6(&self.dw_norm.forward(&self.depthwise.forward(&h)?, train)?)?;
        h = self.project_norm.forward(&self.project.forward(&h)?, train)?;
        if self.residual {
            Ok((h + x)?)
        } else {
            Ok(h)
        }
    }
}

/// Parameters θ_L of the landmark predictor.
#[derive(Debug, Clone)]
pub struct LandmarkNet {
    config: LandmarkNetConfig,
    store: ParamStore,
    stem: Conv2d,
    stem_norm: BatchNorm2d,
    blocks: Vec<Bottleneck>,
    head: Conv2d,
    head_norm: BatchNorm2d,
    s1: Conv2d,
    s2: Conv2d,
    s3: Conv2d,
    fc: Linear,
}

impl LandmarkNet {
    pub fn new(config: LandmarkNetConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = store.root(&mut rng);
        let stem = Conv2d::new(
            &mut root.sub("stem"),
            ConvSpec::new(3, config.stem_channels, 3).stride(2).padding(Padding::Zero(1)).no_bias(),
        )?;
        let stem_norm = BatchNorm2d::new(&mut root.sub("stem_bn"), config.stem_channels)?;
        let mut blocks = Vec::new();
        let mut channels = config.stem_channels;
        for (si, spec) in config.stages.iter().enumerate() {
            for r in 0..spec.repeats {
                let stride = if r == 0 { spec.stride } else { 1 };
                blocks.push(Bottleneck::new(
                    &mut root.sub(format!("stage{si}.{r}")),
                    channels,
                    spec.out_channels,
                    spec.expansion,
                    stride,
                )?);
                channels = spec.out_channels;
            }
        }
        let head = Conv2d::new(&mut root.sub("head"), ConvSpec::new(channels, config.head_channels, 1).no_bias())?;
        let head_norm = BatchNorm2d::new(&mut root.sub("head_bn"), config.head_channels)?;
        let [f1, f2, f3] = config.fusion;
        let s1 = Conv2d::new(&mut root.sub("s1"), ConvSpec::new(channels, f1, 1))?;
        let s2 = Conv2d::new(&mut root.sub("s2"), ConvSpec::new(config.head_channels, f2, 1))?;
        let s3 = Conv2d::new(&mut root.sub("s3"), ConvSpec::new(config.head_channels, f3, 1))?;
        // Predictions start near the frame center with small spread.
        let fc = Linear::with_init(
            &mut root.sub("fc"),
            config.fusion_dim(),
            config.output_dim(),
            Init::Normal(0.1 / (config.fusion_dim() as f64).sqrt()),
            Init::Values(vec![0.5; config.output_dim()]),
        )?;
        Ok(Self {
            config,
            store,
            stem,
            stem_norm,
            blocks,
            head,
            head_norm,
            s1,
            s2,
            s3,
            fc,
        })
    }

    pub fn config(&self) -> &LandmarkNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn blocks(&self) -> &[Bottleneck] {
        &self.blocks
    }

    /// Maps a `(b, 3, s, s)` batch to raw `(b, 136)` coordinates (no clamping).
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.forward_traced(x, train, None)
    }

    pub fn forward_traced(&self, x: &Tensor, train: bool, mut tr: Option<&mut ShapeTrace>) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::ShapeMismatch(format!(
                "landmark net expects 3x{s}x{s} input, got {c}x{h}x{w}"
            )));
        }
        trace(&mut tr, "input", x);
        let mut h = relu6(&self.stem_norm.forward(&self.stem.forward(x)?, train)?)?;
        trace(&mut tr, "stem", &h);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, train)?;
            trace(&mut tr, &format!("block{i}"), &h);
        }
        let c1 = h;
        trace(&mut tr, "C1", &c1);
        let c2 = relu6(&self.head_norm.forward(&self.head.forward(&c1)?, train)?)?;
        trace(&mut tr, "C2", &c2);
        let s1 = global_avg_pool(&self.s1.forward(&c1)?.relu()?)?;
        let s2 = global_avg_pool(&self.s2.forward(&c2)?.relu()?)?;
        let pooled = global_avg_pool(&c2)?.unsqueeze(2)?.unsqueeze(3)?;
        let s3 = self.s3.forward(&pooled)?.relu()?.flatten_from(1)?;
        trace(&mut tr, "S1", &s1);
        trace(&mut tr, "S2", &s2);
        trace(&mut tr, "S3", &s3);
        let fused = Tensor::cat(&[&s1, &s2, &s3], 1)?;
        trace(&mut tr, "fc_in", &fused);
        let out = self.fc.forward(&fused)?;
        trace(&mut tr, "output", &out);
        Ok(out)
    }

    /// Eval-mode prediction for a batch of corrupted images.
    pub fn predict_batch(&self, corrupted: &[&CorruptedImage]) -> Result<Vec<LandmarkSet>> {
        let imgs: Vec<_> = corrupted.iter().map(|c| c.pixels()).collect();
        let x = images_to_tensor(&imgs, self.store.device())?;
        tensor_to_landmarks(&self.forward(&x, false)?)
    }

    pub fn predict(&self, corrupted: &CorruptedImage) -> Result<LandmarkSet> {
        Ok(self.predict_batch(&[corrupted])?.remove(0))
    }
}

/// Squared ℓ2 distance between two landmark batches: per sample the sum of
/// squared coordinate differences, averaged over the batch.
pub fn landmark_loss_tensor(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "landmark loss: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let b = pred.dim(0)?;
    Ok(((pred - gt)?.sqr()?.sum_all()? / b as f64)?)
}

pub fn landmark_loss(pred: &LandmarkSet, gt: &LandmarkSet) -> f64 {
    pred.points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| {
            let dx = p[0] as f64 - g[0] as f64;
            let dy = p[1] as f64 - g[1] as f64;
            dx * dx + dy * dy
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::scalar;
    use candle_core::{DType, Var};

    #[test]
    fn default_stage_table() {
        let cfg = LandmarkNetConfig::default();
        let rows: Vec<_> = cfg
            .stages
            .iter()
            .map(|s| (s.expansion, s.out_channels, s.repeats, s.stride))
            .collect();
        assert_eq!(
            rows,
            vec![(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
        );
        assert_eq!(cfg.stem_channels, 32);
        assert_eq!(cfg.fusion_dim(), 320);
        assert_eq!(cfg.output_dim(), 136);
    }

    #[test]
    fn bottleneck_parameter_count() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Bottleneck::new(&mut store.root(&mut rng), 24, 32, 6, 2).unwrap();
        let expand = 24 * 144 + 2 * 144;
        let depthwise = 144 * 9 + 2 * 144;
        let project = 144 * 32 + 2 * 32;
        assert_eq!(store.num_trainable(), expand + depthwise + project);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = LandmarkNet::new(LandmarkNetConfig::desk(), 9, &Device::Cpu).unwrap();
        let b = LandmarkNet::new(LandmarkNetConfig::desk(), 9, &Device::Cpu).unwrap();
        let sa = a.store().snapshot().unwrap();
        let sb = b.store().snapshot().unwrap();
        for (k, t) in &sa {
            let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = sb[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y, "{k}");
        }
    }

    #[test]
    fn rejects_bad_config_and_input() {
        let mut cfg = LandmarkNetConfig::desk();
        cfg.stages[0].stride = 3;
        assert!(LandmarkNet::new(cfg, 0, &Device::Cpu).is_err());
        let net = LandmarkNet::new(LandmarkNetConfig::desk(), 0, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x, false), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_projection_makes_residual_block_identity() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = Bottleneck::new(&mut store.root(&mut rng), 8, 8, 6, 1).unwrap();
        assert!(block.has_residual());
        let w = block.project().weight();
        w.set(&w.zeros_like().unwrap()).unwrap();
        let x = Tensor::randn(0f32, 1., (2, 8, 6, 6), &Device::Cpu).unwrap();
        for train in [false, true] {
            let y = block.forward(&x, train).unwrap();
            let diff = scalar(&(y - &x).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
            assert_eq!(diff, 0.0);
        }
    }

    #[test]
    fn desk_prediction_contract() {
        let net = LandmarkNet::new(LandmarkNetConfig::desk(), 1, &Device::Cpu).unwrap();
        let img = crate::imaging::Image::from_fn(64, 64, |y, x| [(x as f32 / 32.0) - 1.0, (y as f32 / 64.0), 0.0]);
        let corrupted = crate::imaging::apply_mask(&img, &crate::imaging::Mask::zeros(64, 64)).unwrap();
        let a = net.predict(&corrupted).unwrap();
        let b = net.predict(&corrupted).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points().len(), 68);
        assert!(a.to_flat().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loss_values() {
        let gt = LandmarkSet::uniform(0.0, 0.0);
        let pred = LandmarkSet::uniform(0.1, 0.0);
        assert!((landmark_loss(&pred, &gt) - 0.68).abs() < 1e-6);
        assert_eq!(landmark_loss(&gt, &gt), 0.0);
        assert_eq!(landmark_loss(&pred, &gt), landmark_loss(&gt, &pred));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let pred = Var::from_tensor(&Tensor::randn(0.5f64, 0.2, (2, 136), &dev).unwrap()).unwrap();
        let gt = Tensor::randn(0.5f64, 0.2, (2, 136), &dev).unwrap();
        let loss = landmark_loss_tensor(pred.as_tensor(), &gt).unwrap();
        let analytic = loss.backward().unwrap().get(&pred).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = pred.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-5;
        for i in (0..272).step_by(17) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, (2, 136), &dev).unwrap();
                scalar(&landmark_loss_tensor(&t, &gt).unwrap()).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-3, "index {i}: {fd} vs {}", analytic[i]);
        }
    }
}
