//! Closed-form affine pre-alignment from intensity moments.

use super::{warp, warp_mask, DisplacementField, Image, InterpMode, SegMask};
use crate::error::{Result, SarError};

/// Forward map from floating-image coordinates to reference coordinates,
/// `y = matrix * x + offset`, with points written as `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            offset: [0.0, 0.0],
        }
    }

    pub fn new(matrix: [[f64; 2]; 2], offset: [f64; 2]) -> Result<Self> {
        let t = Self { matrix, offset };
        if !(t.det().abs() > 1e-8) {
            return Err(SarError::contract("affine matrix is not invertible"));
        }
        Ok(t)
    }

    pub fn det(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + self.offset[0],
            m[1][0] * p[0] + m[1][1] * p[1] + self.offset[1],
        ]
    }

    pub fn inverse(&self) -> Self {
        let d = self.det();
        let m = &self.matrix;
        let inv = [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]];
        let o = [
            -(inv[0][0] * self.offset[0] + inv[0][1] * self.offset[1]),
            -(inv[1][0] * self.offset[0] + inv[1][1] * self.offset[1]),
        ];
        Self { matrix: inv, offset: o }
    }

    /// Backward-warping field that resamples a floating image into the
    /// reference frame.
    pub fn to_field(&self, shape: (usize, usize)) -> DisplacementField {
        let inv = self.inverse();
        DisplacementField::from_fn(shape.0, shape.1, |r, c| {
            let y = [r as f64, c as f64];
            let x = inv.apply(y);
            ((x[0] - y[0]) as f32, (x[1] - y[1]) as f32)
        })
        .expect("affine field is finite")
    }

    pub fn resample(&self, img: &Image) -> Result<Image> {
        warp(img, &self.to_field(img.shape()), InterpMode::Bilinear)
    }

    pub fn resample_mask(&self, mask: &SegMask) -> Result<SegMask> {
        warp_mask(mask, &self.to_field(mask.shape()))
    }
}

/// Intensity-weighted centroid and second central moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mass: f64,
    pub centroid: [f64; 2],
    /// `[[rr, rc], [rc, cc]]`
    pub cov: [[f64; 2]; 2],
}

impl Moments {
    pub fn of(img: &Image) -> Result<Self> {
        let (h, w) = img.shape();
        let mut mass = 0.0;
        let (mut sr, mut sc) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                let v = img.get(r, c) as f64;
                mass += v;
                sr += v * r as f64;
                sc += v * c as f64;
            }
        }
        if mass <= 0.0 {
            return Err(SarError::degenerate("image has zero total intensity"));
        }
        let centroid = [sr / mass, sc / mass];
        let (mut rr, mut rc, mut cc) = (0.0, 0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                let v = img.get(r, c) as f64;
                let dr = r as f64 - centroid[0];
                let dc = c as f64 - centroid[1];
                rr += v * dr * dr;
                rc += v * dr * dc;
                cc += v * dc * dc;
            }
        }
        Ok(Self {
            mass,
            centroid,
            cov: [[rr / mass, rc / mass], [rc / mass, cc / mass]],
        })
    }

    fn det(&self) -> f64 {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[0][1]
    }

    /// Major-axis angle measured from the row axis towards the column axis.
    fn orientation(&self) -> f64 {
        0.5 * (2.0 * self.cov[0][1]).atan2(self.cov[0][0] - self.cov[1][1])
    }

    /// `(l1 - l2) / (l1 + l2)` of the covariance eigenvalues.
    fn anisotropy(&self) -> f64 {
        let tr = self.cov[0][0] + self.cov[1][1];
        let diff = ((self.cov[0][0] - self.cov[1][1]).powi(2) + 4.0 * self.cov[0][1].powi(2)).sqrt();
        if tr > 0.0 {
            diff / tr
        } else {
            0.0
        }
    }
}

// Below this anisotropy the principal axis is too ill-defined to estimate rotation.
const MIN_ANISOTROPY: f64 = 0.05;

/// Estimate translation, rotation and isotropic scale mapping `flt` onto
/// `ref_img` from centroids and second moments, and resample `flt` into the
/// reference frame.
pub fn affine_align(flt: &Image, ref_img: &Image) -> Result<(AffineTransform, Image)> {
    if flt.shape() != ref_img.shape() {
        return Err(SarError::contract(format!(
            "cannot align {:?} to {:?}",
            flt.shape(),
            ref_img.shape()
        )));
    }
    let mf = Moments::of(flt)?;
    let mr = Moments::of(ref_img)?;
    let (df, dr) = (mf.det(), mr.det());
    let scale = if df > 0.0 && dr > 0.0 { (dr / df).powf(0.25) } else { 1.0 };
    let angle = if mf.anisotropy() < MIN_ANISOTROPY || mr.anisotropy() < MIN_ANISOTROPY {
        0.0
    } else {
        let mut a = mr.orientation() - mf.orientation();
        while a > std::f64::consts::FRAC_PI_2 {
            a -= std::f64::consts::PI;
        }
        while a <= -std::f64::consts::FRAC_PI_2 {
            a += std::f64::consts::PI;
        }
        a
    };
    let (s, c) = angle.sin_cos();
    let m = [[scale * c, -scale * s], [scale * s, scale * c]];
    let offset = [
        mr.centroid[0] - (m[0][0] * mf.centroid[0] + m[0][1] * mf.centroid[1]),
        mr.centroid[1] - (m[1][0] * mf.centroid[0] + m[1][1] * mf.centroid[1]),
    ];
    let t = AffineTransform::new(m, offset)?;
    let aligned = t.resample(flt)?;
    Ok((t, aligned))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(h: usize, w: usize, cr: f64, cc: f64, a: f64, b: f64, theta: f64) -> Image {
        let (s, c) = theta.sin_cos();
        Image::from_fn(h, w, |r, col| {
            let dr = r as f64 - cr;
            let dc = col as f64 - cc;
            let u = c * dr + s * dc;
            let v = -s * dr + c * dc;
            (-(u * u / (2.0 * a * a) + v * v / (2.0 * b * b))).exp() as f32
        })
        .unwrap()
    }

    #[test]
    fn identity_on_equal_images() {
        let img = blob(48, 48, 22.0, 25.0, 8.0, 4.0, 0.3);
        let (t, out) = affine_align(&img, &img).unwrap();
        assert!((t.matrix[0][0] - 1.0).abs() < 1e-6 && (t.matrix[1][1] - 1.0).abs() < 1e-6);
        assert!(t.matrix[0][1].abs() < 1e-6 && t.matrix[1][0].abs() < 1e-6);
        assert!(t.offset[0].abs() < 1e-6 && t.offset[1].abs() < 1e-6);
        assert_eq!(out, img);
    }

    #[test]
    fn recovers_translation() {
        let ref_img = blob(64, 64, 30.0, 32.0, 7.0, 4.0, 0.4);
        let flt = blob(64, 64, 35.0, 29.0, 7.0, 4.0, 0.4);
        let (t, out) = affine_align(&flt, &ref_img).unwrap();
        assert!((t.offset[0] + 5.0).abs() < 0.5, "{:?}", t.offset);
        assert!((t.offset[1] - 3.0).abs() < 0.5, "{:?}", t.offset);
        let (mo, mr) = (Moments::of(&out).unwrap(), Moments::of(&ref_img).unwrap());
        assert!((mo.centroid[0] - mr.centroid[0]).abs() < 0.5);
        assert!((mo.centroid[1] - mr.centroid[1]).abs() < 0.5);
    }

    #[test]
    fn rotation_moments_match() {
        let ref_img = blob(64, 64, 32.0, 32.0, 9.0, 4.0, 0.2);
        let flt = blob(64, 64, 32.0, 32.0, 9.0, 4.0, 0.2 + 10f64.to_radians());
        let (_, out) = affine_align(&flt, &ref_img).unwrap();
        let (mo, mr) = (Moments::of(&out).unwrap(), Moments::of(&ref_img).unwrap());
        for (a, b) in [(mo.cov[0][0], mr.cov[0][0]), (mo.cov[1][1], mr.cov[1][1])] {
            assert!((a - b).abs() / b < 0.05, "{a} vs {b}");
        }
        assert!((mo.cov[0][1] - mr.cov[0][1]).abs() / mr.cov[0][0].max(mr.cov[1][1]) < 0.05);
    }

    #[test]
    fn zero_mass_is_degenerate() {
        let z = Image::constant(16, 16, 0.0).unwrap();
        let o = Image::constant(16, 16, 0.5).unwrap();
        assert!(matches!(affine_align(&z, &o), Err(SarError::Degenerate(_))));
        assert!(matches!(affine_align(&o, &z), Err(SarError::Degenerate(_))));
    }

    #[test]
    fn inverse_roundtrip() {
        let t = AffineTransform::new([[1.1, -0.2], [0.3, 0.9]], [2.0, -4.0]).unwrap();
        let p = [3.5, -1.25];
        let q = t.inverse().apply(t.apply(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        assert!(AffineTransform::new([[1.0, 2.0], [0.5, 1.0]], [0.0, 0.0]).is_err());
    }
}
