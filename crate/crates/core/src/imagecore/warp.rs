use sarreg_autodiff::warp::{sample_bilinear, warp_bilinear_plane, warp_nearest_plane};

use super::{DisplacementField, Image, SegMask};
use crate::error::{Result, SarError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InterpMode {
    #[default]
    Bilinear,
    Nearest,
}

fn check(shape: (usize, usize), field: &DisplacementField) -> Result<()> {
    if shape != field.shape() {
        return Err(SarError::contract(format!(
            "field {:?} does not match image {:?}",
            field.shape(),
            shape
        )));
    }
    Ok(())
}

/// Backward warp: `out(p) = image(p + field(p))`, clamped at the border.
pub fn warp(image: &Image, field: &DisplacementField, mode: InterpMode) -> Result<Image> {
    check(image.shape(), field)?;
    let (h, w) = image.shape();
    let mut out = vec![0.0f32; h * w];
    match mode {
        InterpMode::Bilinear => {
            warp_bilinear_plane(image.pixels(), h, w, field.rows(), field.cols(), &mut out)
        }
        InterpMode::Nearest => {
            warp_nearest_plane(image.pixels(), h, w, field.rows(), field.cols(), &mut out)
        }
    }
    Image::from_clamped(h, w, out)
}

/// Nearest-neighbour warp of a mask; the result stays binary.
pub fn warp_mask(mask: &SegMask, field: &DisplacementField) -> Result<SegMask> {
    check(mask.shape(), field)?;
    let (h, w) = mask.shape();
    let src: Vec<f32> = mask.pixels().iter().map(|&v| v as f32).collect();
    let mut out = vec![0.0f32; h * w];
    warp_nearest_plane(&src, h, w, field.rows(), field.cols(), &mut out);
    SegMask::new(h, w, out.iter().map(|&v| v as u8).collect())
}

/// Approximate inverse of a backward field by fixed-point iteration
/// `v(p) = -u(p + v(p))`, so that warping by `u` then by `v` is close to the
/// identity wherever `u` is locally invertible.
pub fn invert_field(field: &DisplacementField, iterations: usize) -> DisplacementField {
    let (h, w) = field.shape();
    let mut vr = field.rows().iter().map(|v| -v).collect::<Vec<f32>>();
    let mut vc = field.cols().iter().map(|v| -v).collect::<Vec<f32>>();
    for _ in 0..iterations {
        let mut nr = vec![0.0f32; h * w];
        let mut nc = vec![0.0f32; h * w];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let pr = r as f32 + vr[i];
                let pc = c as f32 + vc[i];
                nr[i] = -sample_bilinear(field.rows(), h, w, pr, pc);
                nc[i] = -sample_bilinear(field.cols(), h, w, pr, pc);
            }
        }
        vr = nr;
        vc = nc;
    }
    DisplacementField::new(h, w, vr, vc).expect("inverse of a finite field is finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, c| c as f32 / (w - 1) as f32).unwrap()
    }

    #[test]
    fn zero_field_is_identity_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::from_fn(12, 10, |_, _| rng.gen::<f32>()).unwrap();
        let z = DisplacementField::zeros(12, 10);
        assert_eq!(warp(&img, &z, InterpMode::Bilinear).unwrap(), img);
        assert_eq!(warp(&img, &z, InterpMode::Nearest).unwrap(), img);
    }

    #[test]
    fn integer_shift_translates_with_border_clamp() {
        let img = ramp(16, 16);
        let f = DisplacementField::constant(16, 16, 0.0, 3.0);
        let out = warp(&img, &f, InterpMode::Bilinear).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(out.get(r, c), img.get(r, (c + 3).min(15)));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let img = ramp(16, 16);
        let f = DisplacementField::zeros(16, 15);
        assert!(matches!(warp(&img, &f, InterpMode::Bilinear), Err(SarError::Contract(_))));
    }

    #[test]
    fn nearest_keeps_masks_binary() {
        let m = SegMask::from_fn(16, 16, |r, c| r > 4 && c < 9);
        let f = DisplacementField::from_fn(16, 16, |r, c| ((r as f32 * 0.37).sin() * 2.2, (c as f32).cos() * 1.7)).unwrap();
        let out = warp_mask(&m, &f).unwrap();
        assert!(out.pixels().iter().all(|&v| v <= 1));
    }

    #[test]
    fn inverse_of_smooth_field_composes_to_identity() {
        let f = DisplacementField::from_fn(32, 32, |r, c| {
            (1.5 * (r as f32 / 9.0).sin(), -1.2 * (c as f32 / 7.0).cos())
        })
        .unwrap();
        let inv = invert_field(&f, 30);
        for r in 4..28 {
            for c in 4..28 {
                let (vr, vc) = inv.get(r, c);
                let pr = r as f32 + vr;
                let pc = c as f32 + vc;
                let ur = sample_bilinear(f.rows(), 32, 32, pr, pc);
                let uc = sample_bilinear(f.cols(), 32, 32, pr, pc);
                assert!((vr + ur).abs() < 1e-3 && (vc + uc).abs() < 1e-3);
            }
        }
    }
}
