use std::path::Path;

use candle_core::Device;

use super::{batch_indices, check_dataset, step_rng, Checkpoint, CheckpointKind, LossLog, MaskSource, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imaging::{apply_mask, images_to_tensor, landmarks_to_tensor};
use crate::landmark_net::{landmark_loss_tensor, LandmarkNet, LandmarkNetConfig};
use crate::nn::ops::scalar;
use crate::nn::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkStepRecord {
    pub step: u64,
    pub loss: f64,
}

/// Trains the landmark predictor on corrupted faces.
pub struct LandmarkTrainer {
    config: TrainConfig,
    net: LandmarkNet,
    opt: Adam,
    step: u64,
}

impl LandmarkTrainer {
    pub fn new(config: TrainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let net = LandmarkNet::new(config.landmark_config(), config.seed, device)?;
        let opt = Adam::new(
            net.store().trainable_vars(),
            AdamConfig::new(config.lr_landmark, config.beta1, config.beta2),
        )?;
        Ok(Self { config, net, opt, step: 0 })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(checkpoint: &Checkpoint, device: &Device) -> Result<Self> {
        checkpoint.expect_kind(CheckpointKind::Landmark)?;
        let mut t = Self::new(checkpoint.config.clone(), device)?;
        t.net.store().load(&checkpoint.group("landmark_net", device)?)?;
        t.opt.load_state(&checkpoint.group("adam", device)?, checkpoint.step)?;
        t.step = checkpoint.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &LandmarkNet {
        &self.net
    }

    pub fn into_net(self) -> LandmarkNet {
        self.net
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(CheckpointKind::Landmark, self.step, self.config.clone());
        c.insert_group("landmark_net", &self.net.store().snapshot()?)?;
        c.insert_group("adam", &self.opt.state())?;
        Ok(c)
    }

    /// One optimizer step on a fresh batch of masked faces.
    pub fn train_step(&mut self, dataset: &Dataset, masks: &MaskSource) -> Result<LandmarkStepRecord> {
        check_dataset(dataset, self.config.image_size)?;
        let size = self.config.image_size;
        let mut rng = step_rng(self.config.seed, self.step, 0);
        let idx = batch_indices(self.config.seed, self.step, self.config.batch_landmark, dataset.len());
        let mut corrupted = Vec::with_capacity(idx.len());
        let mut gts = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = dataset.get(i);
            let m = masks.sample(&mut rng, size, size)?;
            corrupted.push(apply_mask(&s.image, &m.mask)?);
            gts.push(s.landmarks.as_ref().expect("checked above"));
        }
        let device = self.net.store().device().clone();
        let x = images_to_tensor(&corrupted.iter().map(|c| c.pixels()).collect::<Vec<_>>(), &device)?;
        let gt = landmarks_to_tensor(&gts, &device)?;
        let loss = landmark_loss_tensor(&self.net.forward(&x, true)?, &gt)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("landmark loss = {value}"),
            });
        }
        self.opt.set_lr(self.config.lr_at(self.config.lr_landmark, self.step));
        self.opt.step(&loss.backward()?)?;
        let record = LandmarkStepRecord { step: self.step, loss: value };
        self.step += 1;
        Ok(record)
    }

    /// Trains until `config.max_steps`. With `out_dir`, appends to
    /// `landmark_loss.csv` and writes `landmark_<step>.ckpt` plus
    /// `landmark_latest.ckpt` every `checkpoint_every` steps and at the end.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        masks: &MaskSource,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&LandmarkStepRecord) -> bool,
    ) -> Result<()> {
        check_dataset(dataset, self.config.image_size)?;
        let mut log = match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                Some(LossLog::open(&d.join("landmark_loss.csv"), &["step", "l_landmark"])?)
            }
            None => None,
        };
        while self.step < self.config.max_steps {
            let rec = self.train_step(dataset, masks)?;
            if let Some(log) = log.as_mut() {
                log.row(rec.step, &[rec.loss])?;
            }
            let keep_going = on_step(&rec);
            if let Some(d) = out_dir {
                if self.step % self.config.checkpoint_every == 0 || !keep_going || self.step == self.config.max_steps {
                    let c = self.checkpoint()?;
                    c.save(d.join(format!("landmark_{:06}.ckpt", self.step)))?;
                    c.save(d.join("landmark_latest.ckpt"))?;
                }
            }
            if !keep_going {
                break;
            }
        }
        Ok(())
    }
}

/// Rebuilds a landmark predictor from a landmark checkpoint or from the
/// frozen copy embedded in an inpaint checkpoint.
pub fn load_landmark_net(checkpoint: &Checkpoint, device: &Device) -> Result<LandmarkNet> {
    let cfg: LandmarkNetConfig = checkpoint.config.landmark_config();
    let net = LandmarkNet::new(cfg, checkpoint.config.seed, device)?;
    net.store().load(&checkpoint.group("landmark_net", device)?)?;
    Ok(net)
}
