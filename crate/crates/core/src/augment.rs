//! Landmark-conditioned augmentation: re-synthesize a masked region of a
//! labeled face with a frozen inpaintor and reuse the original labels.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::imaging::{apply_mask, composite, generate_block_mask, save_image, save_landmarks, Image, LandmarkSet, Mask};
use crate::metrics::nme;
use crate::pipeline::{Inpainter, LandmarkPredictor};
use crate::train::TrainConfig;

/// Hole coverage range of augmentation masks.
pub const AUGMENT_COVERAGE: (f64, f64) = (0.1, 0.5);

/// Produces an augmented image for a labeled face and a hole mask.
pub trait Augmenter: Send + Sync {
    fn augment(&self, image: &Image, gt: &LandmarkSet, mask: &Mask) -> Result<Image>;
}

/// Control augmenter: returns the input image unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAugmenter;

impl Augmenter for IdentityAugmenter {
    fn augment(&self, image: &Image, _: &LandmarkSet, _: &Mask) -> Result<Image> {
        Ok(image.clone())
    }
}

/// Fills the hole with an inpaintor conditioned on the ground-truth landmarks.
pub struct InpaintAugmenter<'a>(pub &'a dyn Inpainter);

impl Augmenter for InpaintAugmenter<'_> {
    fn augment(&self, image: &Image, gt: &LandmarkSet, mask: &Mask) -> Result<Image> {
        Ok(augment_pair(self.0, image, gt, mask)?.0)
    }
}

/// `I_aug = composite(G(L_gt, M∘I))`, returned with the unchanged labels.
pub fn augment_pair(
    inpainter: &dyn Inpainter,
    image: &Image,
    gt: &LandmarkSet,
    mask: &Mask,
) -> Result<(Image, LandmarkSet)> {
    let corrupted = apply_mask(image, mask)?;
    let raw = inpainter.inpaint(&corrupted, gt)?;
    let out = composite(&raw, image, mask)?.into_image();
    let out = match &image.source_id {
        Some(id) => out.with_source_id(id.clone()),
        None => out,
    };
    Ok((out, gt.clone()))
}

/// Mask for sample `index` in the epoch seeded by `epoch_seed`.
pub fn epoch_mask(epoch_seed: u64, index: usize, height: usize, width: usize) -> Result<Mask> {
    let mut rng = crate::train::step_rng(epoch_seed, index as u64, 5);
    let coverage = rng.random_range(AUGMENT_COVERAGE.0..=AUGMENT_COVERAGE.1);
    generate_block_mask(height, width, rng.random(), coverage)
}

/// One entry of an augmented epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub landmarks: String,
    pub source: String,
    pub augmented: bool,
    pub mask_coverage: Option<f64>,
}

/// Epoch view of `2N` samples: each original followed by its augmented copy.
pub struct EpochView {
    pub dataset: Dataset,
    pub entries: Vec<ManifestEntry>,
}

/// Builds the epoch view; every annotated sample gets an epoch-specific mask.
pub fn augment_epoch(dataset: &Dataset, augmenter: &dyn Augmenter, epoch_seed: u64) -> Result<EpochView> {
    dataset.require_landmarks()?;
    let mut samples = Vec::with_capacity(2 * dataset.len());
    let mut entries = Vec::with_capacity(2 * dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        let gt = s.landmarks.as_ref().expect("checked above");
        let (h, w) = s.image.dims();
        let mask = epoch_mask(epoch_seed, i, h, w)?;
        let aug = augmenter.augment(&s.image, gt, &mask)?;
        let stem = match s.id() {
            "" => format!("{i:05}"),
            id => id.to_string(),
        };
        let aug_stem = format!("{stem}_aug{epoch_seed}");
        entries.push(ManifestEntry {
            image: format!("{stem}.png"),
            landmarks: format!("{stem}.json"),
            source: stem.clone(),
            augmented: false,
            mask_coverage: None,
        });
        entries.push(ManifestEntry {
            image: format!("{aug_stem}.png"),
            landmarks: format!("{aug_stem}.json"),
            source: stem,
            augmented: true,
            mask_coverage: Some(mask.hole_fraction()),
        });
        samples.push(s.clone());
        samples.push(Sample {
            image: aug.with_source_id(aug_stem),
            landmarks: Some(gt.clone()),
        });
    }
    Ok(EpochView {
        dataset: Dataset::new(samples),
        entries,
    })
}

/// Writes the view's PNG/JSON pairs plus `manifest.json` into `dir`.
pub fn write_epoch(view: &EpochView, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, e) in view.dataset.samples().iter().zip(&view.entries) {
        save_image(&s.image, dir.join(&e.image))?;
        if let Some(l) = &s.landmarks {
            save_landmarks(l, dir.join(&e.landmarks))?;
        }
    }
    let manifest = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&view.entries)?;
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub nme_base: f64,
    pub nme_aug: f64,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub config_fingerprint: String,
}

/// Mean NME of `predictor` on unmasked held-out faces.
pub fn holdout_nme(predictor: &dyn LandmarkPredictor, holdout: &Dataset) -> Result<f64> {
    holdout.require_landmarks()?;
    let mut sum = 0.0;
    for s in holdout.samples() {
        let (h, w) = s.image.dims();
        let clean = apply_mask(&s.image, &Mask::zeros(h, w))?;
        sum += nme(&predictor.predict(&clean)?, s.landmarks.as_ref().expect("checked"))?;
    }
    Ok(sum / holdout.len() as f64)
}

/// Trains the landmark predictor twice on equally sized epoch views, one
/// with each original duplicated and one with augmented copies, and
/// compares their held-out NME.
///
/// Both arms see `2N` samples in the same order under the same seed, so the
/// augmented content is the only difference between them.
pub fn augmentation_ablation<P: LandmarkPredictor>(
    mut train_fn: impl FnMut(&Dataset, &TrainConfig) -> Result<P>,
    dataset: &Dataset,
    augmenter: &dyn Augmenter,
    config: &TrainConfig,
    holdout_fraction: f64,
) -> Result<AblationReport> {
    let (train, holdout) = dataset.split(holdout_fraction)?;
    let base_view = augment_epoch(&train, &IdentityAugmenter, config.seed)?;
    let aug_view = augment_epoch(&train, augmenter, config.seed)?;
    let base = train_fn(&base_view.dataset, config)?;
    let nme_base = holdout_nme(&base, &holdout)?;
    let aug = train_fn(&aug_view.dataset, config)?;
    let nme_aug = holdout_nme(&aug, &holdout)?;
    Ok(AblationReport {
        nme_base,
        nme_aug,
        train_samples: train.len(),
        holdout_samples: holdout.len(),
        config_fingerprint: config.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_faces;
    use crate::imaging::CorruptedImage;

    struct Flat(f32);

    impl Inpainter for Flat {
        fn inpaint(&self, c: &CorruptedImage, _: &LandmarkSet) -> Result<Image> {
            let (h, w) = c.dims();
            Ok(Image::filled(h, w, self.0))
        }
    }

    #[test]
    fn pair_keeps_labels_and_context() {
        let d = synthetic_faces(1, 32, 0);
        let s = d.get(0);
        let gt = s.landmarks.as_ref().unwrap();
        let mask = epoch_mask(1, 0, 32, 32).unwrap();
        let (img, labels) = augment_pair(&Flat(0.9), &s.image, gt, &mask).unwrap();
        assert_eq!(&labels, gt);
        for y in 0..32 {
            for x in 0..32 {
                let want = if mask.is_hole(y, x) { [0.9; 3] } else { s.image.pixel(y, x) };
                assert_eq!(img.pixel(y, x), want);
            }
        }
    }

    #[test]
    fn epoch_masks_depend_on_seed() {
        let a = epoch_mask(1, 0, 32, 32).unwrap();
        assert_eq!(a, epoch_mask(1, 0, 32, 32).unwrap());
        assert_ne!(a, epoch_mask(2, 0, 32, 32).unwrap());
        let f = a.hole_fraction();
        assert!((0.05..=0.55).contains(&f), "{f}");
    }

    #[test]
    fn epoch_view_doubles_and_writes() {
        let d = synthetic_faces(3, 32, 0);
        let view = augment_epoch(&d, &InpaintAugmenter(&Flat(-0.2)), 4).unwrap();
        assert_eq!(view.dataset.len(), 6);
        assert!(!view.entries[0].augmented && view.entries[1].augmented);
        assert_eq!(view.dataset.get(1).landmarks, d.get(0).landmarks);
        assert_eq!(view.dataset.get(0).image.data(), d.get(0).image.data());
        let dir = tempfile::tempdir().unwrap();
        write_epoch(&view, dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path(), 32).unwrap();
        assert_eq!(back.len(), 6);
        let manifest: Vec<ManifestEntry> =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest, view.entries);
    }

    #[test]
    fn identity_control_gives_equal_arms() {
        struct Mean;
        impl LandmarkPredictor for Mean {
            fn predict(&self, _: &CorruptedImage) -> Result<LandmarkSet> {
                Ok(crate::data::template_landmarks())
            }
        }
        let d = synthetic_faces(5, 32, 0);
        let cfg = TrainConfig::desk();
        let mut calls = 0;
        let r = augmentation_ablation(
            |view, _| {
                calls += 1;
                assert_eq!(view.len(), 8);
                Ok(Mean)
            },
            &d,
            &IdentityAugmenter,
            &cfg,
            0.2,
        )
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(r.nme_base, r.nme_aug);
        assert_eq!((r.train_samples, r.holdout_samples), (4, 1));
        assert_eq!(r.config_fingerprint, cfg.fingerprint());
    }
}
