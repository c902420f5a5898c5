//! Datasets of face images with optional 68-point annotations, and a
//! procedural face generator for tests and demos.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{load_image, load_landmarks, resize_image, save_image, save_landmarks, Image, LandmarkSet};

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub landmarks: Option<LandmarkSet>,
}

impl Sample {
    pub fn id(&self) -> &str {
        self.image.source_id.as_deref().unwrap_or("")
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Loads every `*.png` in `dir` (sorted by name), resized to `size × size`.
    /// A sibling `<stem>.json` holds the landmarks when present.
    pub fn load_dir(dir: impl AsRef<Path>, size: usize) -> Result<Self> {
        let mut paths = image_paths(dir.as_ref())?;
        paths.sort();
        let mut samples = Vec::with_capacity(paths.len());
        for path in paths {
            let image = resize_image(&load_image(&path)?, size, size);
            let json = path.with_extension("json");
            let landmarks = if json.exists() {
                Some(load_landmarks(&json)?)
            } else {
                None
            };
            samples.push(Sample { image, landmarks });
        }
        log::info!("loaded {} samples from {}", samples.len(), dir.as_ref().display());
        Ok(Self { samples })
    }

    /// Writes `<id>.png` and `<id>.json` per sample; unnamed samples get their index.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            let stem = match s.id() {
                "" => format!("{i:05}"),
                id => id.to_string(),
            };
            save_image(&s.image, dir.join(format!("{stem}.png")))?;
            if let Some(l) = &s.landmarks {
                save_landmarks(l, dir.join(format!("{stem}.json")))?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Common square side length; errors on empty or mixed-size datasets.
    pub fn image_size(&self) -> Result<usize> {
        let first = self.samples.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = first.image.dims();
        if h != w || self.samples.iter().any(|s| s.image.dims() != (h, w)) {
            return Err(Error::ShapeMismatch("dataset images must share one square size".into()));
        }
        Ok(h)
    }

    /// Errors unless every sample is annotated.
    pub fn require_landmarks(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(s) = self.samples.iter().find(|s| s.landmarks.is_none()) {
            return Err(Error::InvalidValue(format!("sample '{}' has no landmarks", s.id())));
        }
        Ok(())
    }

    /// Splits off the last `fraction` of samples (at least one each side).
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if self.samples.len() < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: self.samples.len() });
        }
        let held = ((self.samples.len() as f64 * fraction).round() as usize).clamp(1, self.samples.len() - 1);
        let cut = self.samples.len() - held;
        Ok((Dataset::new(self.samples[..cut].to_vec()), Dataset::new(self.samples[cut..].to_vec())))
    }
}

fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    Ok(out)
}

/// Canonical frontal 68-point layout in normalized coordinates.
pub fn template_landmarks() -> LandmarkSet {
    let mut p: Vec<[f32; 2]> = Vec::with_capacity(68);
    for i in 0..17 {
        let t = PI * i as f32 / 16.0;
        p.push([0.5 - 0.33 * t.cos(), 0.42 + 0.42 * t.sin()]);
    }
    for side in [0.0f32, 0.30] {
        for i in 0..5 {
            let t = i as f32 / 4.0;
            p.push([0.22 + side + 0.20 * t, 0.33 - 0.035 * (PI * t).sin()]);
        }
    }
    for i in 0..4 {
        p.push([0.5, 0.40 + 0.055 * i as f32]);
    }
    for i in 0..5 {
        let t = i as f32 / 4.0;
        p.push([0.43 + 0.14 * t, 0.61 + 0.015 * (PI * t).sin()]);
    }
    for cx in [0.34f32, 0.66] {
        for i in 0..6 {
            let a = PI - PI * i as f32 / 3.0;
            p.push([cx + 0.07 * a.cos(), 0.42 - 0.03 * a.sin()]);
        }
    }
    for i in 0..12 {
        let a = PI - 2.0 * PI * i as f32 / 12.0;
        p.push([0.5 + 0.13 * a.cos(), 0.73 - 0.05 * a.sin()]);
    }
    for i in 0..8 {
        let a = PI - 2.0 * PI * i as f32 / 8.0;
        p.push([0.5 + 0.08 * a.cos(), 0.73 - 0.018 * a.sin()]);
    }
    LandmarkSet::new(p).expect("template has 68 points")
}

fn point_in_polygon(x: f32, y: f32, poly: &[[f32; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ([xi, yi], [xj, yj]) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn dist_to_polyline(x: f32, y: f32, pts: &[[f32; 2]]) -> f32 {
    pts.windows(2)
        .map(|w| {
            let ([ax, ay], [bx, by]) = (w[0], w[1]);
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 { (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            ((x - ax - t * dx).powi(2) + (y - ay - t * dy).powi(2)).sqrt()
        })
        .fold(f32::INFINITY, f32::min)
}

/// Renders a stylized face whose features follow `landmarks`.
pub fn render_face(landmarks: &LandmarkSet, size: usize, skin: [f32; 3], background: [f32; 3]) -> Image {
    let p = landmarks.points();
    // Face outline: the jaw closed by an arc over the forehead.
    let mut outline: Vec<[f32; 2]> = p[0..17].to_vec();
    let (l, r) = (p[0], p[16]);
    let (cx, cy) = ((l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0);
    let half = ((r[0] - l[0]).powi(2) + (r[1] - l[1]).powi(2)).sqrt() / 2.0;
    for i in 1..16 {
        let a = PI * i as f32 / 16.0;
        outline.push([cx + half * a.cos(), cy - 0.9 * half * a.sin()]);
    }
    let eyes = [&p[36..42], &p[42..48]];
    let lips = &p[48..60];
    let mouth = &p[60..68];
    let brows = [&p[17..22], &p[22..27]];
    let nose = &p[27..36];
    let shade = |c: [f32; 3], k: f32| c.map(|v| (v * k).clamp(-1.0, 1.0));
    Image::from_fn(size, size, |yy, xx| {
        let (x, y) = ((xx as f32 + 0.5) / size as f32, (yy as f32 + 0.5) / size as f32);
        let line = 1.2 / size as f32;
        if eyes.iter().any(|e| point_in_polygon(x, y, e)) {
            return [-0.8, -0.8, -0.7];
        }
        if point_in_polygon(x, y, mouth) {
            return [-0.6, -0.9, -0.9];
        }
        if point_in_polygon(x, y, lips) {
            return [0.55, -0.45, -0.4];
        }
        if brows.iter().any(|b| dist_to_polyline(x, y, b) < 1.5 * line) {
            return [-0.5, -0.6, -0.7];
        }
        if dist_to_polyline(x, y, nose) < line {
            return shade(skin, 0.6);
        }
        if point_in_polygon(x, y, &outline) {
            // Mild vertical shading keeps the face from being flat.
            return shade(skin, 1.0 - 0.3 * (y - cy).max(0.0));
        }
        let t = y * 0.6;
        [background[0] - t, background[1] - t * 0.5, background[2]]
    })
}

/// Deterministic procedural faces with jittered pose and expression plus
/// their exact landmarks.
pub fn synthetic_faces(count: usize, size: usize, seed: u64) -> Dataset {
    let template = template_landmarks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|i| {
            let scale = rng.random_range(0.85f32..1.05);
            let angle = rng.random_range(-0.12f32..0.12);
            let (tx, ty) = (rng.random_range(-0.04f32..0.04), rng.random_range(-0.04f32..0.04));
            let open = rng.random_range(0.0f32..1.0);
            let (s, c) = angle.sin_cos();
            let mut k = 0usize;
            let lm = template.map(|[x, y]| {
                let idx = k;
                k += 1;
                // Open the mouth by pushing the lower lip points down.
                let y = if idx >= 48 && y > 0.73 { y + 0.03 * open } else { y };
                let (dx, dy) = ((x - 0.5) * scale, (y - 0.5) * scale);
                [0.5 + tx + c * dx - s * dy, 0.5 + ty + s * dx + c * dy]
            });
            let skin = [
                rng.random_range(0.3f32..0.8),
                rng.random_range(0.0f32..0.35),
                rng.random_range(-0.3f32..0.1),
            ];
            let background = [
                rng.random_range(-0.6f32..0.6),
                rng.random_range(-0.6f32..0.6),
                rng.random_range(-0.6f32..0.6),
            ];
            let image = render_face(&lm, size, skin, background).with_source_id(format!("synth_{i:04}"));
            Sample { image, landmarks: Some(lm) }
        })
        .collect();
    Dataset::new(samples)
}
