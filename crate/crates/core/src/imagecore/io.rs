//! Raster and tensor-file persistence for images, masks and fields.

use std::path::Path;

use image::{ImageBuffer, Luma};

use super::{DisplacementField, Image, SegMask};
use crate::error::{Result, SarError};
use crate::sart::{self, SartTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Load a single-channel raster (8 or 16 bit) and scale it into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let pixels: Vec<f32> = match &dynimg {
        image::DynamicImage::ImageLuma16(buf) => buf.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        _ => dynimg.to_luma8().pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
    };
    Image::new(h, w, pixels)
}

pub fn save_image(img: &Image, path: &Path, depth: BitDepth) -> Result<()> {
    let (h, w) = img.shape();
    match depth {
        BitDepth::Eight => {
            let data = img.pixels().iter().map(|&v| (v * 255.0).round() as u8).collect();
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer sized from image");
            buf.save(path)?;
        }
        BitDepth::Sixteen => {
            let data = img.pixels().iter().map(|&v| (v * 65535.0).round() as u16).collect();
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer sized from image");
            buf.save(path)?;
        }
    }
    Ok(())
}

/// Masks are stored as `uint8` SART tensors of dims `[H, W]`.
pub fn save_mask(mask: &SegMask, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    sart::write(path, &SartTensor::u8(&[h, w], mask.pixels().to_vec()))
}

pub fn load_mask(path: &Path) -> Result<SegMask> {
    let t = sart::read(path)?;
    let bad = |reason: &str| SarError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let data = t.as_u8().ok_or_else(|| bad("mask tensor must be uint8"))?;
    let dims = t.dims_usize();
    if dims.len() != 2 {
        return Err(bad("mask tensor must have rank 2"));
    }
    SegMask::new(dims[0], dims[1], data.to_vec())
}

/// Fields are stored as `float32` SART tensors of dims `[H, W, 2]` holding
/// `(drow, dcol)` per pixel.
pub fn save_field(field: &DisplacementField, path: &Path) -> Result<()> {
    let (h, w) = field.shape();
    let mut data = Vec::with_capacity(2 * h * w);
    for (a, b) in field.rows().iter().zip(field.cols()) {
        data.push(*a);
        data.push(*b);
    }
    sart::write(path, &SartTensor::f32(&[h, w, 2], data))
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    let t = sart::read(path)?;
    let bad = |reason: &str| SarError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let data = t.as_f32().ok_or_else(|| bad("field tensor must be float32"))?;
    let dims = t.dims_usize();
    if dims.len() != 3 || dims[2] != 2 {
        return Err(bad("field tensor must have dims [H, W, 2]"));
    }
    let dr = data.iter().step_by(2).copied().collect();
    let dc = data.iter().skip(1).step_by(2).copied().collect();
    DisplacementField::new(dims[0], dims[1], dr, dc)
}

/// RGB overlay: grayscale background with red reference contour and green
/// warped contour.
pub fn save_overlay(background: &Image, reference: &SegMask, warped: &SegMask, path: &Path) -> Result<()> {
    let (h, w) = background.shape();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let g = (background.get(r, c) * 255.0).round() as u8;
            buf.put_pixel(c as u32, r as u32, image::Rgb([g, g, g]));
        }
    }
    for (r, c) in reference.boundary() {
        buf.put_pixel(c as u32, r as u32, image::Rgb([255, 0, 0]));
    }
    for (r, c) in warped.boundary() {
        let px = buf.get_pixel_mut(c as u32, r as u32);
        *px = if px.0 == [255, 0, 0] {
            image::Rgb([255, 255, 0])
        } else {
            image::Rgb([0, 255, 0])
        };
    }
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(9, 12, |r, c| ((r * 12 + c) % 7) as f32 / 6.0).unwrap();
        save_image(&img, &dir.path().join("a.png"), BitDepth::Sixteen).unwrap();
        let back = load_image(&dir.path().join("a.png")).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() < 1e-4);
        }
        save_image(&img, &dir.path().join("b.png"), BitDepth::Eight).unwrap();
        let back = load_image(&dir.path().join("b.png")).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }

        let m = SegMask::from_fn(9, 12, |r, c| r > c);
        save_mask(&m, &dir.path().join("m.sart")).unwrap();
        assert_eq!(load_mask(&dir.path().join("m.sart")).unwrap(), m);

        let f = DisplacementField::from_fn(9, 12, |r, c| (r as f32 - 0.5, c as f32 * 0.25)).unwrap();
        save_field(&f, &dir.path().join("f.sart")).unwrap();
        assert_eq!(load_field(&dir.path().join("f.sart")).unwrap(), f);
        assert!(load_mask(&dir.path().join("f.sart")).is_err());
    }
}
