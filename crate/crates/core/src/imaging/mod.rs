//! Image, mask and landmark data model.
//!
//! Pixel values live in `[-1, 1]` (the generator's `tanh` range) and are
//! stored height × width × channel. A [`Mask`] marks the hole with `1`; the
//! observed region is its complement and is never stored separately.

mod io;
mod landmarks;
mod mask;
mod tensor;

pub use io::{
    decode_image, decode_mask, encode_mask_png, encode_png, load_image, load_landmarks, resize_image, save_image,
    save_landmarks, save_mask,
};
pub use landmarks::{
    landmark_overlay, render_landmark_map, LandmarkMap, LandmarkSet, LANDMARK_GROUPS, NUM_LANDMARKS,
};
pub use mask::{
    coverage_bucket, generate_block_mask, generate_center_mask, load_irregular_mask,
    resize_mask_nearest, CoverageBucket,
};
pub use tensor::{
    images_to_tensor, landmark_maps_to_tensor, landmarks_to_tensor, masks_to_tensor,
    tensor_to_images, tensor_to_landmarks,
};

use crate::error::{Error, Result};

/// An RGB image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub source_id: Option<String>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x3 image needs {} values, got {}",
                height,
                width,
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidValue(format!(
                "pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            source_id: None,
        })
    }

    /// Builds an image from a per-pixel function; values are clamped into range.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                data.extend(px.iter().map(|v| sanitize(*v)));
            }
        }
        Self {
            height,
            width,
            data,
            source_id: None,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _| [value; 3])
    }

    /// Clamps out-of-range values and maps NaN to zero instead of rejecting.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = sanitize(*v);
        }
        Self::new(height, width, data)
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Writes one pixel; values are sanitized like every other constructor.
    pub fn set_pixel(&mut self, y: usize, x: usize, value: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (d, v) in self.data[i..i + 3].iter_mut().zip(value) {
            *d = sanitize(v);
        }
    }
}

fn sanitize(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// Binary hole mask, `1` inside the hole.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} mask needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidValue("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

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

    pub fn is_hole(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, hole: bool) {
        self.data[y * self.width + x] = hole as u8;
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn hole_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.hole_count() as f64 / self.data.len() as f64
    }
}

/// An image with its hole zeroed out, together with the mask that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedImage {
    pixels: Image,
    mask: Mask,
}

impl CorruptedImage {
    pub fn pixels(&self) -> &Image {
        &self.pixels
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }
}

/// Generator output composited onto the observed region.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedImage {
    pixels: Image,
}

impl CompletedImage {
    pub fn pixels(&self) -> &Image {
        &self.pixels
    }

    pub fn into_image(self) -> Image {
        self.pixels
    }
}

fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Zeroes the hole: `image ∘ (1 − mask)` per channel.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<CorruptedImage> {
    check_dims("apply_mask image vs mask", image.dims(), mask.dims())?;
    let mut data = image.data.clone();
    for (px, &m) in data.chunks_exact_mut(3).zip(&mask.data) {
        if m == 1 {
            px.fill(0.0);
        }
    }
    Ok(CorruptedImage {
        pixels: Image {
            height: image.height,
            width: image.width,
            data,
            source_id: image.source_id.clone(),
        },
        mask: mask.clone(),
    })
}

/// `mask ∘ generated + (1 − mask) ∘ original`, selecting whole pixels so the
/// observed region is copied bit for bit.
pub fn composite(generated: &Image, original: &Image, mask: &Mask) -> Result<CompletedImage> {
    check_dims("composite generated vs original", generated.dims(), original.dims())?;
    check_dims("composite image vs mask", original.dims(), mask.dims())?;
    let data = generated
        .data
        .chunks_exact(3)
        .zip(original.data.chunks_exact(3))
        .zip(&mask.data)
        .flat_map(|((g, o), &m)| if m == 1 { g } else { o }.iter().copied())
        .collect();
    Ok(CompletedImage {
        pixels: Image {
            height: original.height,
            width: original.width,
            data,
            source_id: original.source_id.clone(),
        },
    })
}
