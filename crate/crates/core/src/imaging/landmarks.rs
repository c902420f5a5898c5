use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;

/// Polyline groups of the 68-point annotation: `(first, last, closed)`.
pub const LANDMARK_GROUPS: [(usize, usize, bool); 8] = [
    (0, 16, false),  // jaw contour
    (17, 21, false), // right brow
    (22, 26, false), // left brow
    (27, 35, false), // nose bridge and base
    (36, 41, true),  // right eye
    (42, 47, true),  // left eye
    (48, 59, true),  // outer lip
    (60, 67, true),  // inner lip
];

/// 68 facial landmarks in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f32; 2]>", into = "Vec<[f32; 2]>")]
pub struct LandmarkSet {
    points: Vec<[f32; 2]>,
}

impl LandmarkSet {
    /// Builds a set from exactly 68 points; coordinates are clamped into `[0, 1]`.
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::ShapeMismatch(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        let points = points
            .into_iter()
            .map(|p| [clamp_unit(p[0]), clamp_unit(p[1])])
            .collect();
        Ok(Self { points })
    }

    /// From a flat `[x0, y0, x1, y1, ...]` vector of 136 values.
    pub fn from_flat(values: &[f32]) -> Result<Self> {
        if values.len() != 2 * NUM_LANDMARKS {
            return Err(Error::ShapeMismatch(format!(
                "expected {} coordinates, got {}",
                2 * NUM_LANDMARKS,
                values.len()
            )));
        }
        Self::new(values.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn uniform(x: f32, y: f32) -> Self {
        Self {
            points: vec![[clamp_unit(x), clamp_unit(y)]; NUM_LANDMARKS],
        }
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Applies `f` to every point, re-clamping the result.
    pub fn map(&self, mut f: impl FnMut([f32; 2]) -> [f32; 2]) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|&p| {
                    let q = f(p);
                    [clamp_unit(q[0]), clamp_unit(q[1])]
                })
                .collect(),
        }
    }
}

impl TryFrom<Vec<[f32; 2]>> for LandmarkSet {
    type Error = Error;

    fn try_from(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("landmark coordinates must be finite".into()));
        }
        Self::new(points)
    }
}

impl From<LandmarkSet> for Vec<[f32; 2]> {
    fn from(set: LandmarkSet) -> Self {
        set.points
    }
}

fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Binary single-channel rasterization of a [`LandmarkSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LandmarkMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    fn plot(&mut self, x: i64, y: i64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.data[y as usize * self.width + x as usize] = 1;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let (mut x, mut y) = (x0, y0);
        let mut err = dx + dy;
        loop {
            self.plot(x, y);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

fn to_pixel(v: f32, extent: usize) -> i64 {
    ((v as f64 * extent as f64).floor() as i64).clamp(0, extent as i64 - 1)
}

/// Draws 1-pixel Bresenham polylines through each facial component.
///
/// A normalized coordinate `v` maps to pixel `min(floor(v · extent), extent − 1)`.
pub fn render_landmark_map(landmarks: &LandmarkSet, height: usize, width: usize) -> LandmarkMap {
    let mut map = LandmarkMap {
        height,
        width,
        data: vec![0; height * width],
    };
    if height == 0 || width == 0 {
        return map;
    }
    let px: Vec<(i64, i64)> = landmarks
        .points()
        .iter()
        .map(|p| (to_pixel(p[0], width), to_pixel(p[1], height)))
        .collect();
    for (first, last, closed) in LANDMARK_GROUPS {
        for i in first..last {
            map.line(px[i], px[i + 1]);
        }
        if closed {
            map.line(px[last], px[first]);
        }
    }
    map
}

/// Copy of `image` with the landmark polylines in green and each point
/// marked by a red 3×3 dot.
pub fn landmark_overlay(image: &Image, landmarks: &LandmarkSet) -> Image {
    let (h, w) = image.dims();
    let map = render_landmark_map(landmarks, h, w);
    let dots: Vec<(i64, i64)> = landmarks
        .points()
        .iter()
        .map(|p| (to_pixel(p[0], w), to_pixel(p[1], h)))
        .collect();
    let mut out = Image::from_fn(h, w, |y, x| if map.get(y, x) == 1 { [-1.0, 1.0, -1.0] } else { image.pixel(y, x) });
    for (px, py) in dots {
        for y in (py - 1).max(0)..=(py + 1).min(h as i64 - 1) {
            for x in (px - 1).max(0)..=(px + 1).min(w as i64 - 1) {
                out.set_pixel(y as usize, x as usize, [1.0, -1.0, -1.0]);
            }
        }
    }
    out
}
