use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;

use facefill::augment::{augment_epoch, write_epoch, InpaintAugmenter};
use facefill::data::{synthetic_faces, Dataset};
use facefill::evaluate::{evaluate, standard_mask_suite};
use facefill::imaging::{landmark_overlay, load_image, load_irregular_mask, load_landmarks, save_image, save_landmarks};
use facefill::losses::{FeatureExtractor, IdentityExtractor, Vgg19Extractor};
use facefill::pipeline::{LandmarkPredictor, Pipeline};
use facefill::train::{
    load_landmark_net, Checkpoint, CheckpointKind, InpaintTrainer, LandmarkTrainer, MaskSource, TrainConfig,
};

use crate::service::{router, AppState, ServiceConfig};

/// Reads `path` (defaults when absent) and applies `FACEFILL_*` overrides
/// from the process environment.
pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    Ok(TrainConfig::parse_with_env(&text, std::env::vars())?)
}

fn load_dataset(dir: &Path, size: usize) -> Result<Dataset> {
    let data = Dataset::load_dir(dir, size)?;
    if data.is_empty() {
        bail!("no samples found in {}", dir.display());
    }
    Ok(data)
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub landmark_checkpoint: Option<&'a Path>,
}

pub fn train_landmarks(args: &TrainArgs) -> Result<()> {
    let device = Device::Cpu;
    let mut trainer = match args.resume {
        Some(p) => LandmarkTrainer::resume(&Checkpoint::load(p)?, &device)?,
        None => LandmarkTrainer::new(load_config(args.config)?, &device)?,
    };
    let config = trainer.config().clone();
    let data = load_dataset(args.data, config.image_size)?;
    let masks = MaskSource::from_config(&config)?;
    log::info!(
        "training landmarks on {} samples from step {} to {}",
        data.len(),
        trainer.step(),
        config.max_steps
    );
    trainer.fit(&data, &masks, Some(args.out), |r| {
        if r.step % 100 == 0 {
            log::info!("step {} landmark loss {:.6}", r.step, r.loss);
        }
        true
    })?;
    println!("{}", args.out.join("landmark_latest.ckpt").display());
    Ok(())
}

pub fn train_inpaint(args: &TrainArgs) -> Result<()> {
    let device = Device::Cpu;
    let mut trainer = match args.resume {
        Some(p) => InpaintTrainer::resume(&Checkpoint::load(p)?, &device)?,
        None => {
            let config = load_config(args.config)?;
            let net = match args.landmark_checkpoint {
                Some(p) => {
                    let c = Checkpoint::load(p)?;
                    c.expect_kind(CheckpointKind::Landmark)?;
                    Some(load_landmark_net(&c, &device)?)
                }
                None => None,
            };
            InpaintTrainer::new(config, net, &device)?
        }
    };
    let config = trainer.config().clone();
    let data = load_dataset(args.data, config.image_size)?;
    let masks = MaskSource::from_config(&config)?;
    log::info!(
        "training inpaintor on {} samples from step {} to {}",
        data.len(),
        trainer.step(),
        config.max_steps
    );
    trainer.fit(&data, &masks, Some(args.out), |r| {
        if r.step % 100 == 0 {
            log::info!("step {} pixel {:.5} adv_g {:.5} adv_d {:.5}", r.step, r.pixel, r.adv_g, r.adv_d);
        }
        true
    })?;
    println!("{}", args.out.join("inpaint_latest.ckpt").display());
    Ok(())
}

pub struct InpaintArgs<'a> {
    pub image: &'a Path,
    pub mask: &'a Path,
    pub landmarks: Option<&'a Path>,
    pub checkpoint: &'a Path,
    pub landmark_checkpoint: Option<&'a Path>,
    pub out: &'a Path,
    /// Defaults to `<out stem>_landmarks.png`.
    pub overlay: Option<&'a Path>,
}

pub fn overlay_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}_landmarks.png"))
}

pub fn inpaint(args: &InpaintArgs) -> Result<()> {
    let pipeline = Pipeline::load(args.checkpoint, args.landmark_checkpoint, &Device::Cpu)?;
    let size = pipeline.image_size();
    let image = load_image(args.image)?;
    if image.dims() != (size, size) {
        bail!(
            "{} is {}x{} but the model expects {size}x{size}",
            args.image.display(),
            image.height(),
            image.width()
        );
    }
    let mask = load_irregular_mask(args.mask, size, size)?;
    let landmarks = args.landmarks.map(load_landmarks).transpose()?;
    if landmarks.is_none() && !pipeline.has_landmark_model() {
        bail!("no landmark model available; pass --landmarks or --landmark-checkpoint");
    }
    let out = pipeline.inpaint(&image, &mask, landmarks.as_ref())?;
    save_image(out.completed.pixels(), args.out)?;
    let overlay = args.overlay.map(Path::to_path_buf).unwrap_or_else(|| overlay_path(args.out));
    save_image(&landmark_overlay(out.completed.pixels(), &out.landmarks_used), &overlay)?;
    if landmarks.is_none() {
        save_landmarks(&out.landmarks_used, args.out.with_extension("json"))?;
    }
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub landmark_checkpoint: Option<&'a Path>,
    /// Score with annotated landmarks even when a predictor is available.
    pub ground_truth_landmarks: bool,
    pub vgg: Option<&'a Path>,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<String> {
    let device = Device::Cpu;
    let pipeline = Pipeline::load(args.checkpoint, args.landmark_checkpoint, &device)?;
    let size = pipeline.image_size();
    let data = load_dataset(args.data, size)?;
    let extractor: Box<dyn FeatureExtractor> = match args.vgg {
        Some(p) => Box::new(Vgg19Extractor::load(p, &device)?),
        None => Box::new(IdentityExtractor),
    };
    let predictor: Option<&dyn LandmarkPredictor> =
        (pipeline.has_landmark_model() && !args.ground_truth_landmarks).then_some(&pipeline as _);
    let suite = standard_mask_suite(size, args.seed)?;
    let report = evaluate(predictor, &pipeline, &data, &suite, extractor.as_ref())?;
    if let Some(p) = args.out {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(report.to_table())
}

pub fn augment(data: &Path, checkpoint: &Path, out: &Path, seed: u64) -> Result<usize> {
    let pipeline = Pipeline::load(checkpoint, None, &Device::Cpu)?;
    let dataset = load_dataset(data, pipeline.image_size())?;
    let view = augment_epoch(&dataset, &InpaintAugmenter(&pipeline), seed)?;
    write_epoch(&view, out)?;
    Ok(view.dataset.len())
}

pub fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    synthetic_faces(count, size, seed).save_dir(out)?;
    Ok(())
}

pub struct ServeArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub landmark_checkpoint: Option<&'a Path>,
    pub addr: SocketAddr,
    pub service: ServiceConfig,
}

pub fn serve(args: &ServeArgs) -> Result<()> {
    let pipeline = match args.checkpoint {
        Some(p) => Some(Pipeline::load(p, args.landmark_checkpoint, &Device::Cpu)?),
        None => {
            log::warn!("starting without a model; inference endpoints return 503");
            None
        }
    };
    let state = AppState::new(pipeline, &args.service);
    let app = router(state, &args.service);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}

