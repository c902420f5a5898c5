//! Decoupled training: the landmark predictor first, then the generator and
//! discriminator adversarially with landmarks held fixed.

mod checkpoint;
mod config;
mod inpaint;
mod landmark;
mod log;
mod masks;

pub use checkpoint::{Blob, Checkpoint, CheckpointKind, FORMAT_VERSION, MAGIC};
pub use config::{LandmarkSource, LrSchedule, MaskKind, Profile, TrainConfig, ENV_PREFIX};
pub use inpaint::{InpaintStepRecord, InpaintTrainer, Phase, INPAINT_LOG_COLUMNS};
pub use landmark::{load_landmark_net, LandmarkStepRecord, LandmarkTrainer};
pub use log::LossLog;
pub use masks::{load_mask_dir, MaskSource, SampledMask};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// RNG for one training step. Depends only on `(seed, step, stream)` so a
/// resumed run replays the same draws.
pub fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(8).wrapping_add(stream));
    rng
}

/// Dataset indices for `step`: consecutive slices of per-epoch shuffles.
pub(crate) fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|i| {
            let pos = step * batch as u64 + i;
            let epoch = pos / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut step_rng(seed ^ 0x0ebc_0a11, epoch, 7));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just filled").1[(pos % n as u64) as usize]
        })
        .collect()
}

pub(crate) fn check_dataset(dataset: &Dataset, size: usize) -> Result<()> {
    dataset.require_landmarks()?;
    let got = dataset.image_size()?;
    if got != size {
        return Err(Error::ShapeMismatch(format!(
            "dataset images are {got}x{got} but the model expects {size}x{size}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, 2, 10)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, 4, 6), batch_indices(3, 7, 4, 6));
        assert_eq!(batch_indices(0, 0, 3, 1), vec![0, 0, 0]);
    }

    #[test]
    fn step_streams_are_independent() {
        let a: u64 = step_rng(1, 5, 0).random();
        assert_eq!(a, step_rng(1, 5, 0).random::<u64>());
        assert_ne!(a, step_rng(1, 6, 0).random::<u64>());
        assert_ne!(a, step_rng(1, 5, 1).random::<u64>());
    }
}
