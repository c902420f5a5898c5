//! Bucketed evaluation: corrupt each sample with each mask of a suite,
//! predict landmarks, fill, composite and score.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::Device;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imaging::{
    apply_mask, composite, coverage_bucket, generate_block_mask, generate_center_mask, images_to_tensor, CoverageBucket,
    Image,
};
use crate::losses::FeatureExtractor;
use crate::metrics::{feature_stats, fid, nme, psnr, ssim};
use crate::pipeline::{Inpainter, LandmarkPredictor};
use crate::train::SampledMask;

/// Block coverages targeted by the standard suite, one per ratio bucket.
pub const SUITE_COVERAGES: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.6];

/// The center mask plus one block mask per coverage bucket.
pub fn standard_mask_suite(size: usize, seed: u64) -> Result<Vec<SampledMask>> {
    let mut suite = vec![SampledMask {
        mask: generate_center_mask(size, size)?,
        is_center: true,
    }];
    for (i, &c) in SUITE_COVERAGES.iter().enumerate() {
        suite.push(SampledMask {
            mask: generate_block_mask(size, size, seed.wrapping_add(i as u64), c)?,
            is_center: false,
        });
    }
    Ok(suite)
}

/// Global-average-pooled last feature layer, one vector per image.
pub fn pooled_features(extractor: &dyn FeatureExtractor, images: &[&Image], device: &Device) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let x = images_to_tensor(images, device)?;
    let last = extractor
        .features(&x)?
        .pop()
        .ok_or_else(|| Error::InvalidValue("feature extractor produced no layers".into()))?;
    let pooled = last.mean(3)?.mean(2)?.to_dtype(candle_core::DType::F64)?;
    Ok(pooled.to_vec2::<f64>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub bucket: CoverageBucket,
    pub psnr: f64,
    pub ssim: f64,
    /// Absent when the bucket has fewer than two samples.
    pub fid: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Nonempty buckets in canonical order.
    pub rows: Vec<EvalRow>,
    /// Mean normalized landmark error of the predictor, when one ran.
    pub nme: Option<f64>,
}

impl EvalReport {
    pub fn row(&self, bucket: CoverageBucket) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.bucket == bucket)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,psnr,ssim,fid,count\n");
        for r in &self.rows {
            let fid = r.fid.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.6},{:.6},{},{}", r.bucket.label(), r.psnr, r.ssim, fid, r.count);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8} {:>9} {:>8} {:>10} {:>7}\n", "mask", "PSNR", "SSIM", "FID", "count");
        for r in &self.rows {
            let fid = r.fid.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                out,
                "{:<8} {:>9.3} {:>8.4} {:>10} {:>7}",
                r.bucket.label(),
                r.psnr,
                r.ssim,
                fid,
                r.count
            );
        }
        if let Some(n) = self.nme {
            let _ = writeln!(out, "landmark NME: {n:.5}");
        }
        out
    }
}

#[derive(Default)]
struct Bucket {
    psnr: f64,
    ssim: f64,
    real: Vec<Vec<f64>>,
    fake: Vec<Vec<f64>>,
    count: usize,
}

/// Scores `inpainter` on every (sample, mask) pair. Landmarks come from
/// `predictor` when given, otherwise from the dataset annotations.
pub fn evaluate(
    predictor: Option<&dyn LandmarkPredictor>,
    inpainter: &dyn Inpainter,
    dataset: &Dataset,
    suite: &[SampledMask],
    extractor: &dyn FeatureExtractor,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if suite.is_empty() {
        return Err(Error::InvalidValue("mask suite is empty".into()));
    }
    let device = Device::Cpu;
    let mut buckets: BTreeMap<CoverageBucket, Bucket> = BTreeMap::new();
    let mut nme_sum = 0.0;
    let mut nme_count = 0usize;
    for sample in dataset.samples() {
        let image = &sample.image;
        for case in suite {
            let corrupted = apply_mask(image, &case.mask)?;
            let landmarks = match (predictor, &sample.landmarks) {
                (Some(p), gt) => {
                    let pred = p.predict(&corrupted)?;
                    if let Some(gt) = gt {
                        nme_sum += nme(&pred, gt)?;
                        nme_count += 1;
                    }
                    pred
                }
                (None, Some(gt)) => gt.clone(),
                (None, None) => {
                    return Err(Error::InvalidValue(format!(
                        "sample '{}' has no landmarks and no predictor was given",
                        sample.id()
                    )))
                }
            };
            let raw = inpainter.inpaint(&corrupted, &landmarks)?;
            let completed = composite(&raw, image, &case.mask)?.into_image();
            let b = buckets.entry(coverage_bucket(&case.mask, case.is_center)).or_default();
            b.psnr += psnr(&completed, image)?;
            b.ssim += ssim(&completed, image)?;
            let feats = pooled_features(extractor, &[image, &completed], &device)?;
            let mut feats = feats.into_iter();
            b.real.push(feats.next().expect("two rows"));
            b.fake.push(feats.next().expect("two rows"));
            b.count += 1;
        }
    }
    let mut rows = Vec::new();
    for bucket in CoverageBucket::ALL {
        let Some(b) = buckets.get(&bucket) else { continue };
        let fid = if b.count >= 2 {
            Some(fid(&feature_stats(&b.real)?, &feature_stats(&b.fake)?)?)
        } else {
            None
        };
        rows.push(EvalRow {
            bucket,
            psnr: b.psnr / b.count as f64,
            ssim: b.ssim / b.count as f64,
            fid,
            count: b.count,
        });
    }
    Ok(EvalReport {
        rows,
        nme: (nme_count > 0).then(|| nme_sum / nme_count as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_faces;
    use crate::imaging::{CorruptedImage, LandmarkSet};
    use crate::losses::IdentityExtractor;

    struct Blank;

    impl Inpainter for Blank {
        fn inpaint(&self, c: &CorruptedImage, _: &LandmarkSet) -> Result<Image> {
            let (h, w) = c.dims();
            Ok(Image::filled(h, w, 0.0))
        }
    }

    #[test]
    fn suite_covers_all_buckets() {
        let suite = standard_mask_suite(64, 3).unwrap();
        let mut seen: Vec<_> = suite.iter().map(|m| coverage_bucket(&m.mask, m.is_center)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn blank_fill_scores_below_cap() {
        let data = synthetic_faces(3, 32, 0);
        let suite = standard_mask_suite(32, 0).unwrap();
        let r = evaluate(None, &Blank, &data, &suite, &IdentityExtractor).unwrap();
        assert!(r.rows.len() <= 6 && !r.rows.is_empty());
        assert_eq!(r.rows.iter().map(|r| r.count).sum::<usize>(), 3 * suite.len());
        for row in &r.rows {
            assert!(row.psnr < 100.0 && row.ssim < 1.0);
        }
        assert!(r.nme.is_none());
        let csv = r.to_csv();
        assert!(csv.starts_with("bucket,psnr,ssim,fid,count\n"));
        assert_eq!(csv.lines().count(), r.rows.len() + 1);
        assert!(r.to_table().contains("center"));
    }

    #[test]
    fn single_sample_buckets_have_no_fid() {
        let data = synthetic_faces(1, 32, 0);
        let suite = standard_mask_suite(32, 0).unwrap();
        let r = evaluate(None, &Blank, &data, &suite, &IdentityExtractor).unwrap();
        assert!(r.rows.iter().all(|row| row.fid.is_none()));
        assert!(r.to_table().contains("n/a"));
    }

    #[test]
    fn empty_inputs() {
        let suite = standard_mask_suite(32, 0).unwrap();
        assert!(matches!(
            evaluate(None, &Blank, &Dataset::default(), &suite, &IdentityExtractor),
            Err(Error::EmptyDataset)
        ));
        let data = synthetic_faces(1, 32, 0);
        assert!(evaluate(None, &Blank, &data, &[], &IdentityExtractor).is_err());
    }
}
