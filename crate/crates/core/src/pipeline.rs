//! Inference: predict landmarks from a corrupted face, then fill the hole
//! conditioned on them.

use std::path::Path;

use candle_core::Device;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::imaging::{apply_mask, composite, render_landmark_map, CompletedImage, CorruptedImage, Image, LandmarkSet, Mask};
use crate::landmark_net::LandmarkNet;
use crate::train::{load_landmark_net, Checkpoint, CheckpointKind};

pub trait LandmarkPredictor: Send + Sync {
    fn predict(&self, corrupted: &CorruptedImage) -> Result<LandmarkSet>;
}

/// Produces the raw (uncomposited) fill for a corrupted image.
pub trait Inpainter: Send + Sync {
    fn inpaint(&self, corrupted: &CorruptedImage, landmarks: &LandmarkSet) -> Result<Image>;
}

impl LandmarkPredictor for LandmarkNet {
    fn predict(&self, corrupted: &CorruptedImage) -> Result<LandmarkSet> {
        LandmarkNet::predict(self, corrupted)
    }
}

impl Inpainter for Generator {
    fn inpaint(&self, corrupted: &CorruptedImage, landmarks: &LandmarkSet) -> Result<Image> {
        let (h, w) = corrupted.dims();
        self.generate(corrupted, &render_landmark_map(landmarks, h, w))
    }
}

#[derive(Debug, Clone)]
pub struct InpaintOutput {
    pub completed: CompletedImage,
    pub landmarks_used: LandmarkSet,
}

/// A frozen generator with an optional landmark predictor.
pub struct Pipeline {
    generator: Generator,
    landmark_net: Option<LandmarkNet>,
    fingerprint: String,
}

impl Pipeline {
    pub fn new(generator: Generator, landmark_net: Option<LandmarkNet>, fingerprint: impl Into<String>) -> Self {
        Self {
            generator,
            landmark_net,
            fingerprint: fingerprint.into(),
        }
    }

    /// Builds from an inpaint checkpoint. The landmark predictor comes from
    /// `landmark` when given, otherwise from the copy embedded in `inpaint`.
    pub fn from_checkpoints(inpaint: &Checkpoint, landmark: Option<&Checkpoint>, device: &Device) -> Result<Self> {
        inpaint.expect_kind(CheckpointKind::Inpaint)?;
        let generator = Generator::new(inpaint.config.generator_config(), inpaint.config.seed, device)?;
        generator.store().load(&inpaint.group("generator", device)?)?;
        let landmark_net = match landmark {
            Some(c) => {
                c.expect_kind(CheckpointKind::Landmark)?;
                Some(load_landmark_net(c, device)?)
            }
            None if inpaint.has_group("landmark_net") => Some(load_landmark_net(inpaint, device)?),
            None => None,
        };
        if let Some(net) = &landmark_net {
            if net.config().input_size != generator.config().image_size {
                return Err(Error::InvalidConfig(format!(
                    "landmark model takes {0}x{0} frames but the generator {1}x{1}",
                    net.config().input_size,
                    generator.config().image_size
                )));
            }
        }
        let mut h = Sha256::new();
        h.update(inpaint.to_bytes()?);
        if let Some(c) = landmark {
            h.update(c.to_bytes()?);
        }
        let fingerprint = hex::encode(h.finalize());
        Ok(Self::new(generator, landmark_net, fingerprint))
    }

    pub fn load(inpaint: impl AsRef<Path>, landmark: Option<&Path>, device: &Device) -> Result<Self> {
        let inpaint = Checkpoint::load(inpaint)?;
        let landmark = landmark.map(Checkpoint::load).transpose()?;
        Self::from_checkpoints(&inpaint, landmark.as_ref(), device)
    }

    /// Square frame side the models run at.
    pub fn image_size(&self) -> usize {
        self.generator.config().image_size
    }

    /// Hash of the checkpoint bytes the pipeline was built from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn has_landmark_model(&self) -> bool {
        self.landmark_net.is_some()
    }

    pub fn predict_landmarks(&self, corrupted: &CorruptedImage) -> Result<LandmarkSet> {
        self.landmark_net
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no landmark model loaded; supply landmarks explicitly".into()))?
            .predict(corrupted)
    }

    /// Corrupts `image` with `mask`, fills the hole and composites. Without
    /// `landmarks` they are predicted from the corrupted input.
    pub fn inpaint(&self, image: &Image, mask: &Mask, landmarks: Option<&LandmarkSet>) -> Result<InpaintOutput> {
        let corrupted = apply_mask(image, mask)?;
        let landmarks_used = match landmarks {
            Some(l) => l.clone(),
            None => self.predict_landmarks(&corrupted)?,
        };
        let raw = Inpainter::inpaint(&self.generator, &corrupted, &landmarks_used)?;
        Ok(InpaintOutput {
            completed: composite(&raw, image, mask)?,
            landmarks_used,
        })
    }
}

impl LandmarkPredictor for Pipeline {
    fn predict(&self, corrupted: &CorruptedImage) -> Result<LandmarkSet> {
        self.predict_landmarks(corrupted)
    }
}

impl Inpainter for Pipeline {
    fn inpaint(&self, corrupted: &CorruptedImage, landmarks: &LandmarkSet) -> Result<Image> {
        Inpainter::inpaint(&self.generator, corrupted, landmarks)
    }
}
