//! Inpainting generator: a U-shaped encoder/decoder with dilated residual
//! blocks, long-short term attention at the bottleneck and 1×1 channel
//! attention on each skip fusion.

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, landmark_maps_to_tensor, tensor_to_images, CorruptedImage, Image, LandmarkMap};
use crate::nn::ops::instance_norm;
use crate::nn::{attend, trace, Conv2d, ConvSpec, ConvTranspose2d, Init, ParamStore, Padding, Scope, ShapeTrace, SpatialAttention};

const IN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub encoder_channels: [usize; 3],
    pub num_dilated_blocks: usize,
    pub dilation: usize,
    pub use_lsta: bool,
    pub use_landmark_channel: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            encoder_channels: [64, 128, 256],
            num_dilated_blocks: 7,
            dilation: 2,
            use_lsta: true,
            use_landmark_channel: true,
        }
    }
}

impl GeneratorConfig {
    /// 64×64 frames with quartered channel widths.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            encoder_channels: [16, 32, 64],
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

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.contains(&0) || self.dilation == 0 {
            return Err(Error::InvalidConfig("generator widths and dilation must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "generator image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// `x + IN(conv(relu(IN(conv(x)))))` with dilated 3×3 convolutions.
#[derive(Debug, Clone)]
pub struct DilatedResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl DilatedResidualBlock {
    pub fn new(scope: &mut Scope<'_>, channels: usize, dilation: usize) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, 3)
            .dilation(dilation)
            .padding(Padding::Zero(dilation));
        Ok(Self {
            conv1: Conv2d::new(&mut scope.sub("conv1"), spec)?,
            conv2: Conv2d::new(&mut scope.sub("conv2"), spec)?,
        })
    }

    pub fn convs(&self) -> [&Conv2d; 2] {
        [&self.conv1, &self.conv2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let expected = self.conv1.weight().dim(1)?;
        if x.dim(1)? != expected {
            return Err(Error::ShapeMismatch(format!(
                "dilated block expects {expected} channels, got {}",
                x.dim(1)?
            )));
        }
        let h = instance_norm(&self.conv1.forward(x)?, IN_EPS)?.relu()?;
        let h = instance_norm(&self.conv2.forward(&h)?, IN_EPS)?;
        Ok((x + h)?)
    }
}

/// One attention map computed from the decoder features, applied to the
/// decoder features (short-term context) and to the encoder features
/// (long-term context); both contexts enter through zero-initialized gates.
#[derive(Debug, Clone)]
pub struct LongShortAttention {
    attention: SpatialAttention,
    gamma_short: Var,
    gamma_long: Var,
    output: Conv2d,
}

impl LongShortAttention {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        let identity: Vec<f32> = (0..channels * channels)
            .map(|i| if i / channels == i % channels { 1.0 } else { 0.0 })
            .collect();
        Ok(Self {
            attention: SpatialAttention::new(&mut scope.sub("attn"), channels)?,
            gamma_short: scope.param("gamma_short", 1, Init::Zeros)?,
            gamma_long: scope.param("gamma_long", 1, Init::Zeros)?,
            output: Conv2d::with_init(
                &mut scope.sub("out"),
                ConvSpec::new(channels, channels, 1),
                Init::Values(identity),
            )?,
        })
    }

    pub fn gammas(&self) -> (&Var, &Var) {
        (&self.gamma_short, &self.gamma_long)
    }

    /// Returns the fused features and the `(b, n, n)` attention scores.
    pub fn forward(&self, encoder: &Tensor, decoder: &Tensor) -> Result<(Tensor, Tensor)> {
        if encoder.dims() != decoder.dims() {
            return Err(Error::ShapeMismatch(format!(
                "attention inputs differ: {:?} vs {:?}",
                encoder.dims(),
                decoder.dims()
            )));
        }
        let scores = self.attention.scores(decoder)?;
        let short = attend(&scores, decoder)?;
        let long = attend(&scores, encoder)?;
        let gs = self.gamma_short.as_tensor().reshape((1, 1, 1, 1))?;
        let gl = self.gamma_long.as_tensor().reshape((1, 1, 1, 1))?;
        let fused = ((decoder + short.broadcast_mul(&gs)?)? + long.broadcast_mul(&gl)?)?;
        Ok((self.output.forward(&fused)?, scores))
    }
}

#[derive(Debug, Clone)]
enum Bridge {
    Attention(LongShortAttention),
    Plain(Conv2d),
}

/// Parameters θ_P of the generator.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    blocks: Vec<DilatedResidualBlock>,
    bridge: Bridge,
    d1: ConvTranspose2d,
    fuse2: Conv2d,
    d2: ConvTranspose2d,
    fuse1: Conv2d,
    out: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3] = config.encoder_channels;
        let mut store = ParamStore::new(device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = store.root(&mut rng);
        let e1 = Conv2d::new(
            &mut root.sub("e1"),
            ConvSpec::new(config.input_channels(), c1, 7).padding(Padding::Reflect(3)),
        )?;
        let e2 = Conv2d::new(&mut root.sub("e2"), ConvSpec::new(c1, c2, 4).stride(2).padding(Padding::Zero(1)))?;
        let e3 = Conv2d::new(&mut root.sub("e3"), ConvSpec::new(c2, c3, 4).stride(2).padding(Padding::Zero(1)))?;
        let blocks = (0..config.num_dilated_blocks)
            .map(|i| DilatedResidualBlock::new(&mut root.sub(format!("res{i}")), c3, config.dilation))
            .collect::<Result<Vec<_>>>()?;
        let bridge = if config.use_lsta {
            Bridge::Attention(LongShortAttention::new(&mut root.sub("lsta"), c3)?)
        } else {
            Bridge::Plain(Conv2d::new(&mut root.sub("bridge"), ConvSpec::new(2 * c3, c3, 1))?)
        };
        let d1 = ConvTranspose2d::new(&mut root.sub("d1"), c3, c2, 4, 2, 1)?;
        let fuse2 = Conv2d::new(&mut root.sub("fuse2"), ConvSpec::new(2 * c2, 2 * c2, 1))?;
        let d2 = ConvTranspose2d::new(&mut root.sub("d2"), 2 * c2, c1, 4, 2, 1)?;
        let fuse1 = Conv2d::new(&mut root.sub("fuse1"), ConvSpec::new(2 * c1, 2 * c1, 1))?;
        let out = Conv2d::with_init(
            &mut root.sub("out"),
            ConvSpec::new(2 * c1, 3, 7).padding(Padding::Reflect(3)),
            // tanh output: plain fan-in scaling, no ReLU gain
            Init::Normal((1.0 / (2 * c1 * 49) as f64).sqrt()),
        )?;
        Ok(Self {
            config,
            store,
            e1,
            e2,
            e3,
            blocks,
            bridge,
            d1,
            fuse2,
            d2,
            fuse1,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn output_conv(&self) -> &Conv2d {
        &self.out
    }

    pub fn dilated_blocks(&self) -> &[DilatedResidualBlock] {
        &self.blocks
    }

    pub fn attention(&self) -> Option<&LongShortAttention> {
        match &self.bridge {
            Bridge::Attention(a) => Some(a),
            Bridge::Plain(_) => None,
        }
    }

    /// Generator input: the corrupted image, plus the landmark map when the
    /// landmark channel is enabled.
    pub fn assemble_input(&self, corrupted: &Tensor, landmark_map: &Tensor) -> Result<Tensor> {
        if self.config.use_landmark_channel {
            Ok(Tensor::cat(&[corrupted, landmark_map], 1)?)
        } else {
            Ok(corrupted.clone())
        }
    }

    /// `(b, 3, s, s)` corrupted images and `(b, 1, s, s)` landmark maps to
    /// `(b, 3, s, s)` raw outputs in `[-1, 1]`.
    pub fn forward(&self, corrupted: &Tensor, landmark_map: &Tensor) -> Result<Tensor> {
        self.forward_traced(corrupted, landmark_map, None)
    }

    pub fn forward_traced(&self, corrupted: &Tensor, landmark_map: &Tensor, mut tr: Option<&mut ShapeTrace>) -> Result<Tensor> {
        let (b, c, h, w) = corrupted.dims4()?;
        let s = self.config.image_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::ShapeMismatch(format!("generator expects 3x{s}x{s} images, got {c}x{h}x{w}")));
        }
        if landmark_map.dims() != [b, 1, s, s] {
            return Err(Error::ShapeMismatch(format!(
                "landmark map {:?} does not match image batch {:?}",
                landmark_map.dims(),
                corrupted.dims()
            )));
        }
        let x = self.assemble_input(corrupted, landmark_map)?;
        trace(&mut tr, "input", &x);
        let e1 = instance_norm(&self.e1.forward(&x)?, IN_EPS)?.relu()?;
        trace(&mut tr, "E1", &e1);
        let e2 = instance_norm(&self.e2.forward(&e1)?, IN_EPS)?.relu()?;
        trace(&mut tr, "E2", &e2);
        let e3 = instance_norm(&self.e3.forward(&e2)?, IN_EPS)?.relu()?;
        trace(&mut tr, "E3", &e3);
        let mut r = e3.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            r = block.forward(&r)?;
            trace(&mut tr, &format!("R{}", i + 1), &r);
        }
        let bridge_in = Tensor::cat(&[&e3, &r], 1)?;
        trace(&mut tr, "bridge_in", &bridge_in);
        let fused = match &self.bridge {
            Bridge::Attention(lsta) => lsta.forward(&e3, &r)?.0,
            Bridge::Plain(conv) => conv.forward(&bridge_in)?,
        };
        trace(&mut tr, "bridge_out", &fused);
        let d1 = instance_norm(&self.d1.forward(&fused)?, IN_EPS)?.relu()?;
        trace(&mut tr, "D1", &d1);
        let skip2 = Tensor::cat(&[&e2, &d1], 1)?;
        trace(&mut tr, "E2D1", &skip2);
        let f2 = instance_norm(&self.fuse2.forward(&skip2)?, IN_EPS)?.relu()?;
        trace(&mut tr, "fuse2", &f2);
        let d2 = instance_norm(&self.d2.forward(&f2)?, IN_EPS)?.relu()?;
        trace(&mut tr, "D2", &d2);
        let skip1 = Tensor::cat(&[&e1, &d2], 1)?;
        trace(&mut tr, "E1D2", &skip1);
        let f1 = instance_norm(&self.fuse1.forward(&skip1)?, IN_EPS)?.relu()?;
        trace(&mut tr, "fuse1", &f1);
        let out = self.out.forward(&f1)?.tanh()?;
        trace(&mut tr, "output", &out);
        Ok(out)
    }

    /// Runs the generator on one corrupted image; compositing is left to the caller.
    pub fn generate(&self, corrupted: &CorruptedImage, landmark_map: &LandmarkMap) -> Result<Image> {
        Ok(self.generate_batch(&[corrupted], &[landmark_map])?.remove(0))
    }

    pub fn generate_batch(&self, corrupted: &[&CorruptedImage], maps: &[&LandmarkMap]) -> Result<Vec<Image>> {
        if corrupted.len() != maps.len() {
            return Err(Error::ShapeMismatch("one landmark map per image required".into()));
        }
        for (c, m) in corrupted.iter().zip(maps) {
            if c.dims() != m.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "image {:?} vs landmark map {:?}",
                    c.dims(),
                    m.dims()
                )));
            }
        }
        let dev = self.store.device();
        let imgs: Vec<_> = corrupted.iter().map(|c| c.pixels()).collect();
        let x = images_to_tensor(&imgs, dev)?;
        let l = landmark_maps_to_tensor(maps, dev)?;
        tensor_to_images(&self.forward(&x, &l)?)
    }
}
