//! Conversions between the pixel data model and `(batch, channel, h, w)` tensors.

use candle_core::{DType, Device, Tensor};

use super::{Image, LandmarkMap, LandmarkSet, Mask, NUM_LANDMARKS};
use crate::error::{Error, Result};

fn same_dims<T>(items: &[T], dims: impl Fn(&T) -> (usize, usize)) -> Result<(usize, usize)> {
    let first = items
        .first()
        .map(&dims)
        .ok_or_else(|| Error::InvalidValue("empty batch".into()))?;
    if items.iter().any(|i| dims(i) != first) {
        return Err(Error::ShapeMismatch("batch items differ in size".into()));
    }
    Ok(first)
}

/// Stacks images into an `f32` tensor of shape `(b, 3, h, w)`.
pub fn images_to_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
    let (h, w) = same_dims(images, |i| i.dims())?;
    let mut data: Vec<f32> = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        for c in 0..3 {
            data.extend(img.data().iter().skip(c).step_by(3));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

pub fn masks_to_tensor(masks: &[&Mask], device: &Device) -> Result<Tensor> {
    let (h, w) = same_dims(masks, |m| m.dims())?;
    let data: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| v as f32))
        .collect();
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?)
}

pub fn landmark_maps_to_tensor(maps: &[&LandmarkMap], device: &Device) -> Result<Tensor> {
    let (h, w) = same_dims(maps, |m| m.dims())?;
    let data: Vec<f32> = maps
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| v as f32))
        .collect();
    Ok(Tensor::from_vec(data, (maps.len(), 1, h, w), device)?)
}

/// Flattens landmark sets into a `(b, 136)` tensor.
pub fn landmarks_to_tensor(sets: &[&LandmarkSet], device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = sets.iter().flat_map(|s| s.to_flat()).collect();
    Ok(Tensor::from_vec(data, (sets.len(), 2 * NUM_LANDMARKS), device)?)
}

/// Converts `(b, 136)` predictions into landmark sets, clamping into `[0, 1]`.
pub fn tensor_to_landmarks(t: &Tensor) -> Result<Vec<LandmarkSet>> {
    let rows = t.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    rows.iter().map(|r| LandmarkSet::from_flat(r)).collect()
}

/// Splits a `(b, 3, h, w)` tensor into images, clamping into `[-1, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let chw = t.to_dtype(DType::F32)?.permute((0, 2, 3, 1))?.contiguous()?;
    let flat = chw.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks_exact(h * w * 3)
        .take(b)
        .map(|chunk| Image::from_clamped(h, w, chunk.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_tensor_round_trip() {
        let a = Image::from_fn(3, 5, |y, x| [y as f32 * 0.1, x as f32 * -0.1, 0.5]);
        let b = Image::filled(3, 5, -0.75);
        let t = images_to_tensor(&[&a, &b], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 3, 5]);
        // channel 1 of pixel (2, 4) in the first image
        let v: f32 = t.get(0).unwrap().get(1).unwrap().get(2).unwrap().get(4).unwrap().to_scalar().unwrap();
        assert_eq!(v, a.get(2, 4, 1));
        let back = tensor_to_images(&t).unwrap();
        assert_eq!(back[0].data(), a.data());
        assert_eq!(back[1].data(), b.data());
    }

    #[test]
    fn mismatched_batch_rejected() {
        let a = Image::filled(3, 5, 0.0);
        let b = Image::filled(3, 4, 0.0);
        assert!(images_to_tensor(&[&a, &b], &Device::Cpu).is_err());
    }
}
