use std::fs;
use std::path::Path;

use std::io::Cursor;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::{Image, LandmarkSet, Mask};
use crate::error::{Error, Result};

/// Loads an 8-bit image as RGB mapped linearly onto `[-1, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = from_rgb8(image::open(path)?.to_rgb8())?;
    Ok(match path.file_stem() {
        Some(stem) => img.with_source_id(stem.to_string_lossy()),
        None => img,
    })
}

fn from_rgb8(rgb: RgbImage) -> Result<Image> {
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 127.5 - 1.0).collect();
    Image::new(h as usize, w as usize, data)
}

fn to_rgb8(image: &Image) -> RgbImage {
    RgbImage::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.data().iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer length matches image dimensions")
}

/// Decodes an encoded image (PNG, or any enabled format) from memory.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    from_rgb8(image::load_from_memory(bytes)?.to_rgb8())
}

/// Decodes a mask from memory; any channel layout is reduced to luma and
/// values above 127 mark the hole.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let luma = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = luma.dimensions();
    Mask::new(h as usize, w as usize, luma.into_raw().into_iter().map(|v| u8::from(v > 127)).collect())
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(image).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let buf = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&v| v * 255).collect(),
    )
    .expect("buffer length matches mask dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Bilinear resize, keeping `source_id`. Values stay inside `[-1, 1]`.
pub fn resize_image(image: &Image, height: usize, width: usize) -> Image {
    if image.dims() == (height, width) {
        return image.clone();
    }
    let rgb32 = image::Rgb32FImage::from_raw(image.width() as u32, image.height() as u32, image.data().to_vec())
        .expect("buffer length matches image dimensions");
    let resized = DynamicImage::ImageRgb32F(rgb32).resize_exact(width as u32, height as u32, FilterType::Triangle);
    let data = resized.into_rgb32f().into_raw();
    let out = Image::from_clamped(height, width, data).expect("resize preserves length");
    match &image.source_id {
        Some(id) => out.with_source_id(id.clone()),
        None => out,
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    to_rgb8(image).save(path.as_ref())?;
    Ok(())
}

/// Writes a mask as grayscale PNG, 255 marking the hole.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let buf = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&v| v * 255).collect(),
    )
    .expect("buffer length matches mask dimensions");
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_landmarks(landmarks: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(landmarks)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::load_irregular_mask;

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 4, |y, x| {
            let v = ((y * 4 + x) * 12) as f32;
            [v / 127.5 - 1.0, 1.0 - v / 127.5, 0.0]
        });
        let path = dir.path().join("a.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.dims(), (5, 4));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 127.5 + 1e-6, "{a} vs {b}");
        }
        assert_eq!(back.source_id.as_deref(), Some("a"));
    }

    #[test]
    fn mask_files() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("white.png");
        GrayImage::from_pixel(6, 6, image::Luma([255])).save(&white).unwrap();
        assert_eq!(load_irregular_mask(&white, 6, 6).unwrap(), Mask::ones(6, 6));

        let black = dir.path().join("black.png");
        GrayImage::from_pixel(6, 6, image::Luma([0])).save(&black).unwrap();
        assert_eq!(load_irregular_mask(&black, 3, 3).unwrap(), Mask::zeros(3, 3));

        let rgb = dir.path().join("rgb.png");
        RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 0])).save(&rgb).unwrap();
        assert!(matches!(
            load_irregular_mask(&rgb, 4, 4),
            Err(Error::UnsupportedImage { .. })
        ));
        assert!(load_irregular_mask(dir.path().join("missing.png"), 4, 4).is_err());
    }

    #[test]
    fn checkerboard_downsampled() {
        // 2x2-cell checkerboard at 16x16, read back at 8x8.
        let (src, dst) = (16u32, 8usize);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checker.png");
        let board = GrayImage::from_fn(src, src, |x, y| {
            image::Luma([if ((x / 2) + (y / 2)) % 2 == 0 { 255 } else { 0 }])
        });
        board.save(&path).unwrap();
        let mask = load_irregular_mask(&path, dst, dst).unwrap();
        // Reference: the destination pixel i covers source pixels 2i and 2i+1
        // and samples the second one (its center rounds down to it).
        for y in 0..dst {
            for x in 0..dst {
                let (sx, sy) = (2 * x + 1, 2 * y + 1);
                let expected = board.get_pixel(sx as u32, sy as u32).0[0] > 127;
                assert_eq!(mask.is_hole(y, x), expected);
            }
        }
        assert_eq!(mask.hole_count(), 32);
    }

    #[test]
    fn in_memory_codecs() {
        let img = Image::from_fn(3, 5, |y, x| [(y * 5 + x) as f32 / 15.0 - 0.5, 0.25, -1.0]);
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.dims(), (3, 5));
        let again = decode_image(&encode_png(&back).unwrap()).unwrap();
        assert_eq!(again.data(), back.data());

        let mask = Mask::from_fn(4, 3, |y, x| (x + y) % 2 == 0);
        assert_eq!(decode_mask(&encode_mask_png(&mask).unwrap()).unwrap(), mask);
        assert!(decode_image(b"not a png").is_err());
    }

    #[test]
    fn resize_keeps_constant_images_and_range() {
        let flat = Image::filled(7, 9, 0.5).with_source_id("x");
        let r = resize_image(&flat, 4, 4);
        assert_eq!(r.dims(), (4, 4));
        assert!(r.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
        assert_eq!(r.source_id.as_deref(), Some("x"));
        let ramp = Image::from_fn(8, 8, |_, x| [x as f32 / 3.5 - 1.0; 3]);
        assert!(resize_image(&ramp, 13, 5).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn mask_png_uses_255_for_holes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = Mask::from_fn(4, 6, |y, x| x > y);
        save_mask(&mask, &path).unwrap();
        let raw = image::open(&path).unwrap().to_luma8();
        assert!(raw.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        assert_eq!(load_irregular_mask(&path, 4, 6).unwrap(), mask);
    }

    #[test]
    fn landmark_json_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.json");
        let set = LandmarkSet::uniform(0.1, 0.9);
        save_landmarks(&set, &path).unwrap();
        assert_eq!(load_landmarks(&path).unwrap(), set);
    }
}
