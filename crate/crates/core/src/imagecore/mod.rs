//! Images, masks, displacement fields and the geometric operations on them.

mod affine;
mod bspline;
pub mod io;
mod warp;

pub use affine::{affine_align, AffineTransform, Moments};
pub use bspline::{bspline_to_dense, cubic_basis, random_bspline_grid, random_elastic_deformation, BSplineGrid};
pub use warp::{invert_field, warp, warp_mask, InterpMode};

use sarreg_autodiff::{Real, Tensor};

use crate::error::{Result, SarError};

/// Single-channel intensity image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub const MIN_SIDE: usize = 8;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        check_shape(height, width, pixels.len())?;
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(SarError::contract(format!(
                "image intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, pixels })
    }

    /// Build from arbitrary finite values, clamping them into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(SarError::contract("non-finite image intensity"));
        }
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, pixels)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }

    /// `[1, 1, H, W]` tensor view.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.pixels.iter().map(|&v| T::from_f32(v).unwrap()).collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Binary mask; every value is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(SarError::contract(format!(
                "mask of {} pixels does not match shape {height}x{width}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&v| v > 1) {
            return Err(SarError::contract("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c) as u8);
            }
        }
        Self { height, width, pixels }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| false)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.pixels[r * self.width + c] == 1
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `[1, 1, H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.pixels.iter().map(|&v| T::from_u8(v).unwrap()).collect(),
        )
    }

    /// Mask pixels with at least one 4-neighbour outside the mask. Pixels on
    /// the image edge count their missing neighbours as outside.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0 || c == 0 || r + 1 == self.height || c + 1 == self.width;
                if edge
                    || !self.get(r - 1, c)
                    || !self.get(r + 1, c)
                    || !self.get(r, c - 1)
                    || !self.get(r, c + 1)
                {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Dense backward-warping field: output pixel `p` samples the source at
/// `p + (dr, dc)`, in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    height: usize,
    width: usize,
    dr: Vec<f32>,
    dc: Vec<f32>,
}

impl DisplacementField {
    pub fn new(height: usize, width: usize, dr: Vec<f32>, dc: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dr.len() != height * width || dc.len() != height * width {
            return Err(SarError::contract("field components do not match shape"));
        }
        if dr.iter().chain(&dc).any(|v| !v.is_finite()) {
            return Err(SarError::contract("non-finite displacement"));
        }
        Ok(Self { height, width, dr, dc })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dr: f32, dc: f32) -> Self {
        Self {
            height,
            width,
            dr: vec![dr; height * width],
            dc: vec![dc; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Result<Self> {
        let mut dr = Vec::with_capacity(height * width);
        let mut dc = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let (a, b) = f(r, c);
                dr.push(a);
                dc.push(b);
            }
        }
        Self::new(height, width, dr, dc)
    }

    /// Build from a `[1, 2, H, W]` (or `[2, H, W]`) tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if t.numel() != 2 * h * w {
            return Err(SarError::contract(format!("tensor {s:?} is not a single field")));
        }
        let conv = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap()).collect::<Vec<_>>();
        Self::new(h, w, conv(&t.data()[..h * w]), conv(&t.data()[h * w..]))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn rows(&self) -> &[f32] {
        &self.dr
    }

    pub fn cols(&self) -> &[f32] {
        &self.dc
    }

    pub fn get(&self, r: usize, c: usize) -> (f32, f32) {
        let i = r * self.width + c;
        (self.dr[i], self.dc[i])
    }

    pub fn negated(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            dr: self.dr.iter().map(|v| -v).collect(),
            dc: self.dc.iter().map(|v| -v).collect(),
        }
    }

    /// Largest displacement vector length.
    pub fn max_norm(&self) -> f32 {
        self.dr
            .iter()
            .zip(&self.dc)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f32::max)
    }

    pub fn mean_norm(&self) -> f64 {
        self.dr
            .iter()
            .zip(&self.dc)
            .map(|(a, b)| ((a * a + b * b) as f64).sqrt())
            .sum::<f64>()
            / self.dr.len() as f64
    }

    /// `[1, 2, H, W]` tensor (rows then columns).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .dr
            .iter()
            .chain(&self.dc)
            .map(|&v| T::from_f32(v).unwrap())
            .collect();
        Tensor::new(&[1, 2, self.height, self.width], data)
    }
}

fn check_shape(height: usize, width: usize, len: usize) -> Result<()> {
    if height < Image::MIN_SIDE || width < Image::MIN_SIDE {
        return Err(SarError::contract(format!(
            "image {height}x{width} is smaller than {m}x{m}",
            m = Image::MIN_SIDE
        )));
    }
    if len != height * width {
        return Err(SarError::contract(format!(
            "{len} pixels do not fill a {height}x{width} image"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_invariants() {
        assert!(Image::new(8, 8, vec![0.5; 64]).is_ok());
        assert!(Image::new(7, 8, vec![0.5; 56]).is_err());
        assert!(Image::new(8, 8, vec![1.5; 64]).is_err());
        assert!(Image::new(8, 8, vec![f32::NAN; 64]).is_err());
        assert!(Image::new(8, 8, vec![0.5; 63]).is_err());
        let c = Image::from_clamped(8, 8, vec![2.0; 64]).unwrap();
        assert!(c.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_invariants_and_boundary() {
        assert!(SegMask::new(2, 2, vec![0, 1, 2, 0]).is_err());
        let m = SegMask::from_fn(6, 6, |r, c| (1..5).contains(&r) && (1..5).contains(&c));
        assert_eq!(m.count(), 16);
        // 4x4 square: 12 boundary pixels, 4 interior
        assert_eq!(m.boundary().len(), 12);
        let full = SegMask::from_fn(3, 3, |_, _| true);
        assert_eq!(full.boundary().len(), 8);
    }

    #[test]
    fn field_tensor_roundtrip() {
        let f = DisplacementField::from_fn(8, 9, |r, c| (r as f32 * 0.5, -(c as f32))).unwrap();
        let t = f.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, 2, 8, 9]);
        assert_eq!(DisplacementField::from_tensor(&t).unwrap(), f);
    }
}
