use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

/// Hole in the axis-centered half-height × half-width rectangle.
pub fn generate_center_mask(height: usize, width: usize) -> Result<Mask> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidValue(format!(
            "center mask needs at least 2x2, got {height}x{width}"
        )));
    }
    let (mh, mw) = (height / 2, width / 2);
    let (top, left) = ((height - mh) / 2, (width - mw) / 2);
    Ok(Mask::from_fn(height, width, |y, x| {
        (top..top + mh).contains(&y) && (left..left + mw).contains(&x)
    }))
}

const BLOCK_TOLERANCE: f64 = 0.05;
const BLOCK_ATTEMPTS: usize = 64;
const RECTS_PER_ATTEMPT: usize = 256;

/// Union of random axis-aligned rectangles whose hole fraction lands within
/// five percentage points of `target_coverage`.
pub fn generate_block_mask(
    height: usize,
    width: usize,
    seed: u64,
    target_coverage: f64,
) -> Result<Mask> {
    if !(target_coverage > 0.0 && target_coverage < 1.0) {
        return Err(Error::InvalidValue(format!(
            "target coverage {target_coverage} must lie in (0, 1)"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidValue("block mask needs a non-empty frame".into()));
    }
    let area = (height * width) as f64;
    let lo = target_coverage - BLOCK_TOLERANCE;
    let hi = target_coverage + BLOCK_TOLERANCE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..BLOCK_ATTEMPTS {
        let mut mask = Mask::zeros(height, width);
        let mut holes = 0usize;
        for _ in 0..RECTS_PER_ATTEMPT {
            let coverage = holes as f64 / area;
            if coverage >= lo && coverage <= hi {
                return Ok(mask);
            }
            if coverage > hi {
                break;
            }
            // Size each rectangle against the area still missing so late
            // additions do not overshoot.
            let missing = (target_coverage - coverage) * area;
            let rect_area = (missing * rng.random_range(0.4..1.2)).max(1.0);
            let aspect: f64 = rng.random_range(0.5..2.0);
            let rh = ((rect_area * aspect).sqrt().round() as usize).clamp(1, height);
            let rw = ((rect_area / rh as f64).round() as usize).clamp(1, width);
            let top = rng.random_range(0..=height - rh);
            let left = rng.random_range(0..=width - rw);
            for y in top..top + rh {
                for x in left..left + rw {
                    if !mask.is_hole(y, x) {
                        mask.set(y, x, true);
                        holes += 1;
                    }
                }
            }
        }
        let coverage = holes as f64 / area;
        if coverage >= lo && coverage <= hi {
            return Ok(mask);
        }
    }
    Err(Error::UnreachableCoverage {
        target: target_coverage,
        attempts: BLOCK_ATTEMPTS,
    })
}

/// Nearest-neighbour resize sampling each destination pixel's center.
pub fn resize_mask_nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    let (sh, sw) = mask.dims();
    Mask::from_fn(height, width, |y, x| {
        let sy = (((y as f64 + 0.5) * sh as f64 / height as f64) as usize).min(sh - 1);
        let sx = (((x as f64 + 0.5) * sw as f64 / width as f64) as usize).min(sw - 1);
        mask.is_hole(sy, sx)
    })
}

/// Reads a grayscale mask file (bright = hole), binarized at 127 and resized
/// to `height × width` with nearest-neighbour sampling.
pub fn load_irregular_mask(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Mask> {
    let path = path.as_ref();
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        image::DynamicImage::ImageLuma16(_) => img.to_luma8(),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("expected grayscale, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    let data = gray.pixels().map(|p| (p.0[0] > 127) as u8).collect();
    let mask = Mask::new(h as usize, w as usize, data)?;
    if mask.dims() == (height, width) {
        Ok(mask)
    } else {
        Ok(resize_mask_nearest(&mask, height, width))
    }
}

/// Hole-coverage buckets used when reporting metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CoverageBucket {
    #[serde(rename = "10-20%")]
    P10To20,
    #[serde(rename = "20-30%")]
    P20To30,
    #[serde(rename = "30-40%")]
    P30To40,
    #[serde(rename = "40-50%")]
    P40To50,
    #[serde(rename = "50%+")]
    P50Plus,
    #[serde(rename = "center")]
    Center,
}

impl CoverageBucket {
    pub const ALL: [CoverageBucket; 6] = [
        CoverageBucket::P10To20,
        CoverageBucket::P20To30,
        CoverageBucket::P30To40,
        CoverageBucket::P40To50,
        CoverageBucket::P50Plus,
        CoverageBucket::Center,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CoverageBucket::P10To20 => "10-20%",
            CoverageBucket::P20To30 => "20-30%",
            CoverageBucket::P30To40 => "30-40%",
            CoverageBucket::P40To50 => "40-50%",
            CoverageBucket::P50Plus => "50%+",
            CoverageBucket::Center => "center",
        }
    }

    /// Bucket for a hole fraction; fractions under 10% fall into the lowest bucket.
    pub fn from_fraction(fraction: f64) -> Self {
        if fraction < 0.2 {
            CoverageBucket::P10To20
        } else if fraction < 0.3 {
            CoverageBucket::P20To30
        } else if fraction < 0.4 {
            CoverageBucket::P30To40
        } else if fraction < 0.5 {
            CoverageBucket::P40To50
        } else {
            CoverageBucket::P50Plus
        }
    }
}

impl fmt::Display for CoverageBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn coverage_bucket(mask: &Mask, is_center: bool) -> CoverageBucket {
    if is_center {
        return CoverageBucket::Center;
    }
    let fraction = mask.hole_fraction();
    if fraction < 0.1 {
        log::warn!(
            "hole fraction {:.3} is below the evaluated range; reporting it as 10-20%",
            fraction
        );
    }
    CoverageBucket::from_fraction(fraction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_mask_256() {
        let m = generate_center_mask(256, 256).unwrap();
        for y in 0..256 {
            for x in 0..256 {
                let inside = (64..=191).contains(&y) && (64..=191).contains(&x);
                assert_eq!(m.is_hole(y, x), inside, "({y},{x})");
            }
        }
        assert_eq!(m.hole_fraction(), 0.25);
    }

    #[test]
    fn center_mask_smallest() {
        let m = generate_center_mask(2, 2).unwrap();
        assert_eq!(m.hole_count(), 1);
        assert!(generate_center_mask(1, 8).is_err());
    }

    #[test]
    fn block_mask_hits_target() {
        for seed in 0..20 {
            let m = generate_block_mask(64, 64, seed, 0.15).unwrap();
            let c = m.hole_fraction();
            assert!((0.10..=0.20).contains(&c), "seed {seed}: {c}");
        }
    }

    #[test]
    fn block_mask_is_deterministic() {
        let a = generate_block_mask(48, 40, 7, 0.3).unwrap();
        let b = generate_block_mask(48, 40, 7, 0.3).unwrap();
        assert_eq!(a, b);
        let c = generate_block_mask(48, 40, 8, 0.3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn block_mask_large_target_lands_in_top_bucket() {
        let m = generate_block_mask(64, 64, 3, 0.55).unwrap();
        assert!((0.50..=0.60).contains(&m.hole_fraction()));
        assert_eq!(coverage_bucket(&m, false), CoverageBucket::P50Plus);
    }

    #[test]
    fn block_mask_rejects_bad_targets() {
        assert!(generate_block_mask(8, 8, 0, 0.0).is_err());
        assert!(generate_block_mask(8, 8, 0, 1.0).is_err());
        // One pixel is 25% of a 2x2 frame, so 15% ± 5 is unreachable.
        assert!(matches!(
            generate_block_mask(2, 2, 0, 0.15),
            Err(Error::UnreachableCoverage { .. })
        ));
    }

    #[test]
    fn bucket_labels() {
        let m = Mask::from_fn(10, 10, |y, _| y < 3);
        assert_eq!(m.hole_fraction(), 0.3);
        assert_eq!(coverage_bucket(&m, false).label(), "30-40%");
        let m = Mask::from_fn(20, 20, |y, x| y * 20 + x < 140);
        assert_eq!(coverage_bucket(&m, false).label(), "30-40%");
        assert_eq!(coverage_bucket(&Mask::zeros(4, 4), false).label(), "10-20%");
        assert_eq!(coverage_bucket(&Mask::zeros(4, 4), true), CoverageBucket::Center);
        assert_eq!(coverage_bucket(&Mask::ones(4, 4), true), CoverageBucket::Center);
    }

    #[test]
    fn buckets_partition_the_evaluated_range() {
        let bounds = [0.1, 0.2, 0.3, 0.4, 0.5];
        for (i, &b) in bounds.iter().enumerate() {
            assert_eq!(CoverageBucket::from_fraction(b), CoverageBucket::ALL[i]);
            if i > 0 {
                assert_eq!(
                    CoverageBucket::from_fraction(b - 1e-9),
                    CoverageBucket::ALL[i - 1]
                );
            }
        }
        assert_eq!(CoverageBucket::from_fraction(1.0), CoverageBucket::P50Plus);
    }

    #[test]
    fn nearest_resize_identity() {
        let m = Mask::from_fn(5, 7, |y, x| (x + 2 * y) % 3 == 0);
        assert_eq!(resize_mask_nearest(&m, 5, 7), m);
    }
}
