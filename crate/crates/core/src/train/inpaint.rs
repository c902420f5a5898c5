use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};

use super::{
    batch_indices, check_dataset, load_landmark_net, step_rng, Checkpoint, CheckpointKind, LandmarkSource, LossLog,
    MaskSource, TrainConfig,
};
use crate::data::Dataset;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::imaging::{
    images_to_tensor, landmark_maps_to_tensor, masks_to_tensor, render_landmark_map, tensor_to_landmarks, LandmarkMap,
};
use crate::landmark_net::LandmarkNet;
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, perceptual_loss, pixel_loss, style_loss, total_generator_loss, tv_loss,
    FeatureExtractor, IdentityExtractor, LossComponents, Vgg19Extractor,
};
use crate::nn::ops::scalar;
use crate::nn::{Adam, AdamConfig};

/// Columns of `inpaint_loss.csv`.
pub const INPAINT_LOG_COLUMNS: [&str; 7] = ["step", "l_pixel", "l_perc", "l_style", "l_tv", "l_advG", "l_advD"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintStepRecord {
    pub step: u64,
    /// Updates in the order they ran.
    pub phases: Vec<Phase>,
    pub pixel: f64,
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
    pub adv_g: f64,
    pub adv_d: f64,
}

impl InpaintStepRecord {
    pub fn log_values(&self) -> [f64; 6] {
        [self.pixel, self.perceptual, self.style, self.tv, self.adv_g, self.adv_d]
    }
}

/// Adversarial trainer for the generator and discriminator.
pub struct InpaintTrainer {
    config: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    landmark_net: Option<LandmarkNet>,
    opt_g: Adam,
    opt_d: Adam,
    extractor: Arc<dyn FeatureExtractor>,
    step: u64,
}

impl InpaintTrainer {
    /// `landmark_net` is required when `landmark_source = predicted` and is
    /// otherwise only carried into checkpoints for inference.
    pub fn new(config: TrainConfig, landmark_net: Option<LandmarkNet>, device: &Device) -> Result<Self> {
        config.validate()?;
        if config.landmark_source == LandmarkSource::Predicted && landmark_net.is_none() {
            return Err(Error::InvalidConfig("landmark_source = predicted needs a landmark checkpoint".into()));
        }
        if let Some(net) = &landmark_net {
            if *net.config() != config.landmark_config() {
                return Err(Error::InvalidConfig(format!(
                    "landmark model {:?} does not match this run's {:?}",
                    net.config(),
                    config.landmark_config()
                )));
            }
        }
        let extractor: Arc<dyn FeatureExtractor> = match &config.vgg_weights {
            Some(p) => Arc::new(Vgg19Extractor::load(p, device)?),
            None => {
                log::warn!("no vgg_weights configured; perceptual and style losses compare raw pixels");
                Arc::new(IdentityExtractor)
            }
        };
        let generator = Generator::new(config.generator_config(), config.seed, device)?;
        let discriminator = Discriminator::new(config.discriminator_config(), config.seed.wrapping_add(1), device)?;
        let opt_g = Adam::new(
            generator.store().trainable_vars(),
            AdamConfig::new(config.lr_generator, config.beta1, config.beta2),
        )?;
        let opt_d = Adam::new(
            discriminator.store().trainable_vars(),
            AdamConfig::new(config.lr_discriminator, config.beta1, config.beta2),
        )?;
        Ok(Self {
            config,
            generator,
            discriminator,
            landmark_net,
            opt_g,
            opt_d,
            extractor,
            step: 0,
        })
    }

    /// Replaces the feature network used by the perceptual and style terms.
    pub fn with_extractor(mut self, extractor: Arc<dyn FeatureExtractor>) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn resume(checkpoint: &Checkpoint, device: &Device) -> Result<Self> {
        checkpoint.expect_kind(CheckpointKind::Inpaint)?;
        let landmark = if checkpoint.has_group("landmark_net") {
            Some(load_landmark_net(checkpoint, device)?)
        } else {
            None
        };
        let mut t = Self::new(checkpoint.config.clone(), landmark, device)?;
        t.generator.store().load(&checkpoint.group("generator", device)?)?;
        t.discriminator.store().load(&checkpoint.group("discriminator", device)?)?;
        t.opt_g.load_state(&checkpoint.group("adam_g", device)?, checkpoint.step)?;
        t.opt_d.load_state(&checkpoint.group("adam_d", device)?, checkpoint.step)?;
        t.step = checkpoint.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(CheckpointKind::Inpaint, self.step, self.config.clone());
        c.insert_group("generator", &self.generator.store().snapshot()?)?;
        c.insert_group("discriminator", &self.discriminator.store().snapshot()?)?;
        c.insert_group("adam_g", &self.opt_g.state())?;
        c.insert_group("adam_d", &self.opt_d.state())?;
        if let Some(net) = &self.landmark_net {
            c.insert_group("landmark_net", &net.store().snapshot()?)?;
        }
        Ok(c)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn landmark_net(&self) -> Option<&LandmarkNet> {
        self.landmark_net.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn non_finite(&self, what: &str, value: f64) -> Error {
        Error::NonFiniteLoss {
            step: self.step,
            detail: format!("{what} = {value}"),
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, dataset: &Dataset, masks: &MaskSource) -> Result<InpaintStepRecord> {
        let size = self.config.image_size;
        check_dataset(dataset, size)?;
        let device = self.generator.store().device().clone();
        let mut rng = step_rng(self.config.seed, self.step, 1);
        let idx = batch_indices(self.config.seed, self.step, self.config.batch_inpaint, dataset.len());

        let mut sampled = Vec::with_capacity(idx.len());
        for _ in &idx {
            sampled.push(masks.sample(&mut rng, size, size)?.mask);
        }
        let images: Vec<_> = idx.iter().map(|&i| &dataset.get(i).image).collect();
        let gt_maps: Vec<LandmarkMap> = idx
            .iter()
            .map(|&i| render_landmark_map(dataset.get(i).landmarks.as_ref().expect("checked"), size, size))
            .collect();
        let real = images_to_tensor(&images, &device)?;
        let mask = masks_to_tensor(&sampled.iter().collect::<Vec<_>>(), &device)?;
        let keep = mask.affine(-1.0, 1.0)?;
        let corrupted = real.broadcast_mul(&keep)?;
        let gt_map = landmark_maps_to_tensor(&gt_maps.iter().collect::<Vec<_>>(), &device)?;
        let g_map = match (self.config.landmark_source, &self.landmark_net) {
            (LandmarkSource::Predicted, Some(net)) => {
                let pred = tensor_to_landmarks(&net.forward(&corrupted, false)?)?;
                let maps: Vec<_> = pred.iter().map(|l| render_landmark_map(l, size, size)).collect();
                landmark_maps_to_tensor(&maps.iter().collect::<Vec<_>>(), &device)?
            }
            _ => gt_map.clone(),
        };
        let composite = |raw: &Tensor| -> Result<Tensor> {
            Ok((raw.broadcast_mul(&mask)? + real.broadcast_mul(&keep)?)?)
        };
        let mut phases = Vec::with_capacity(2);

        // One generator pass serves both updates: detached for the
        // discriminator, live for the generator.
        let raw = self.generator.forward(&corrupted, &g_map)?;

        // Discriminator update on real and composited fake, both with L_gt.
        let weights = self.discriminator.normalized_weights(true)?;
        let fake = composite(&raw.detach())?;
        let d_fake = self.discriminator.forward_with_weights(&fake, &gt_map, &weights, None)?;
        let d_real = self.discriminator.forward_with_weights(&real, &gt_map, &weights, None)?;
        let l_d = adversarial_d_loss(&d_fake, &d_real)?;
        let adv_d = scalar(&l_d)?;
        if !adv_d.is_finite() {
            return Err(self.non_finite("l_advD", adv_d));
        }
        self.opt_d.set_lr(self.config.lr_at(self.config.lr_discriminator, self.step));
        self.opt_d.step(&l_d.backward()?)?;
        phases.push(Phase::Discriminator);

        // Generator update against the refreshed discriminator.
        let completed = composite(&raw)?;
        let weights = self.discriminator.normalized_weights(false)?;
        let scores = self.discriminator.forward_with_weights(&completed, &gt_map, &weights, None)?;
        let components = LossComponents {
            pixel: pixel_loss(&raw, &real, &mask)?,
            perceptual: perceptual_loss(&raw, &real, self.extractor.as_ref())?,
            style: style_loss(&raw, &real, &mask, self.extractor.as_ref())?,
            tv: tv_loss(&completed)?,
            adversarial: adversarial_g_loss(&scores)?,
        };
        let total = total_generator_loss(&components, &self.config.loss_weights(), self.step)?;
        self.opt_g.set_lr(self.config.lr_at(self.config.lr_generator, self.step));
        self.opt_g.step(&total.backward()?)?;
        phases.push(Phase::Generator);

        let [pixel, perceptual, style, tv, adv_g] = components.values()?;
        let record = InpaintStepRecord {
            step: self.step,
            phases,
            pixel,
            perceptual,
            style,
            tv,
            adv_g,
            adv_d,
        };
        self.step += 1;
        Ok(record)
    }

    /// Trains until `config.max_steps`, logging to `inpaint_loss.csv` and
    /// checkpointing into `out_dir` when given.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        masks: &MaskSource,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&InpaintStepRecord) -> bool,
    ) -> Result<()> {
        check_dataset(dataset, self.config.image_size)?;
        let mut log = match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                Some(LossLog::open(&d.join("inpaint_loss.csv"), &INPAINT_LOG_COLUMNS)?)
            }
            None => None,
        };
        while self.step < self.config.max_steps {
            let rec = self.train_step(dataset, masks)?;
            if let Some(log) = log.as_mut() {
                log.row(rec.step, &rec.log_values())?;
            }
            let keep_going = on_step(&rec);
            if let Some(d) = out_dir {
                if self.step % self.config.checkpoint_every == 0 || !keep_going || self.step == self.config.max_steps {
                    let c = self.checkpoint()?;
                    c.save(d.join(format!("inpaint_{:06}.ckpt", self.step)))?;
                    c.save(d.join("inpaint_latest.ckpt"))?;
                }
            }
            if !keep_going {
                break;
            }
        }
        Ok(())
    }
}
