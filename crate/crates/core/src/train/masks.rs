use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{MaskKind, TrainConfig};
use crate::error::{Error, Result};
use crate::imaging::{generate_block_mask, generate_center_mask, load_irregular_mask, Mask};

/// Where training masks come from.
#[derive(Debug, Clone)]
pub enum MaskSource {
    Center,
    /// Random rectangles with coverage uniform in `[min, max]`.
    Block { min: f64, max: f64 },
    Irregular(Vec<Mask>),
    /// Irregular or block with equal probability.
    Mixed { irregular: Vec<Mask>, min: f64, max: f64 },
}

#[derive(Debug, Clone)]
pub struct SampledMask {
    pub mask: Mask,
    pub is_center: bool,
}

/// Loads every PNG in `dir` as a hole mask at `size × size`.
pub fn load_mask_dir(dir: &Path, size: usize) -> Result<Vec<Mask>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!("no mask PNGs in {}", dir.display())));
    }
    paths.iter().map(|p| load_irregular_mask(p, size, size)).collect()
}

impl MaskSource {
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        let (min, max) = (config.block_coverage_min, config.block_coverage_max);
        let load = || -> Result<Vec<Mask>> {
            let dir = config
                .mask_dir
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig("mask_dir is required for irregular masks".into()))?;
            load_mask_dir(dir, config.image_size)
        };
        Ok(match config.mask_source {
            MaskKind::Center => MaskSource::Center,
            MaskKind::Block => MaskSource::Block { min, max },
            MaskKind::Irregular => MaskSource::Irregular(load()?),
            MaskKind::Mixed => MaskSource::Mixed {
                irregular: load()?,
                min,
                max,
            },
        })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, height: usize, width: usize) -> Result<SampledMask> {
        let block = |rng: &mut ChaCha8Rng, min: f64, max: f64| -> Result<SampledMask> {
            let target = if max > min { rng.random_range(min..=max) } else { min };
            let mask = generate_block_mask(height, width, rng.random(), target)?;
            Ok(SampledMask { mask, is_center: false })
        };
        let pick = |rng: &mut ChaCha8Rng, masks: &[Mask]| -> Result<SampledMask> {
            let mask = &masks[rng.random_range(0..masks.len())];
            if mask.dims() != (height, width) {
                return Err(Error::ShapeMismatch(format!("mask {:?} vs frame {height}x{width}", mask.dims())));
            }
            Ok(SampledMask {
                mask: mask.clone(),
                is_center: false,
            })
        };
        match self {
            MaskSource::Center => Ok(SampledMask {
                mask: generate_center_mask(height, width)?,
                is_center: true,
            }),
            MaskSource::Block { min, max } => block(rng, *min, *max),
            MaskSource::Irregular(masks) => pick(rng, masks),
            MaskSource::Mixed { irregular, min, max } => {
                if rng.random_bool(0.5) {
                    pick(rng, irregular)
                } else {
                    block(rng, *min, *max)
                }
            }
        }
    }
}
