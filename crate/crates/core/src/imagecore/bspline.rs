//! Cubic B-spline free-form deformation.
//!
//! Control point `(i, j)` sits at pixel position `((i - 1) * spacing,
//! (j - 1) * spacing)`, so a pixel at `u = p / spacing` with `k = floor(u)`
//! is influenced by control indices `k ..= k + 3`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DisplacementField;
use crate::error::{Result, SarError};

#[derive(Clone, Debug, PartialEq)]
pub struct BSplineGrid {
    spacing: usize,
    rows: usize,
    cols: usize,
    /// Row-major control displacements `(drow, dcol)` in pixels.
    coeffs: Vec<(f64, f64)>,
}

impl BSplineGrid {
    /// Control grid dimensions needed to cover an image: extent plus a
    /// three-point border.
    pub fn required_dims(shape: (usize, usize), spacing: usize) -> (usize, usize) {
        (shape.0.div_ceil(spacing) + 3, shape.1.div_ceil(spacing) + 3)
    }

    pub fn zeros(shape: (usize, usize), spacing: usize) -> Result<Self> {
        if spacing < 2 {
            return Err(SarError::contract("control spacing must be at least 2 px"));
        }
        let (rows, cols) = Self::required_dims(shape, spacing);
        Ok(Self {
            spacing,
            rows,
            cols,
            coeffs: vec![(0.0, 0.0); rows * cols],
        })
    }

    pub fn new(spacing: usize, rows: usize, cols: usize, coeffs: Vec<(f64, f64)>) -> Result<Self> {
        if spacing < 2 {
            return Err(SarError::contract("control spacing must be at least 2 px"));
        }
        if coeffs.len() != rows * cols {
            return Err(SarError::contract("coefficient count does not match grid dims"));
        }
        if coeffs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(SarError::contract("non-finite control displacement"));
        }
        Ok(Self { spacing, rows, cols, coeffs })
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn coeffs(&self) -> &[(f64, f64)] {
        &self.coeffs
    }

    pub fn set(&mut self, i: usize, j: usize, value: (f64, f64)) {
        self.coeffs[i * self.cols + j] = value;
    }

    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        self.coeffs[i * self.cols + j]
    }

    /// Largest absolute value over all coefficient components.
    pub fn max_abs_component(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|&(a, b)| [a.abs(), b.abs()])
            .fold(0.0, f64::max)
    }
}

/// The four uniform cubic B-spline segment weights at local offset `t ∈ [0, 1)`.
pub fn cubic_basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - t).powi(3) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Evaluate the tensor-product cubic B-spline expansion at every pixel.
pub fn bspline_to_dense(grid: &BSplineGrid, shape: (usize, usize)) -> Result<DisplacementField> {
    let (h, w) = shape;
    let (need_r, need_c) = BSplineGrid::required_dims(shape, grid.spacing);
    if grid.rows < need_r || grid.cols < need_c {
        return Err(SarError::contract(format!(
            "control grid {}x{} does not cover {h}x{w} at spacing {} (needs {need_r}x{need_c})",
            grid.rows, grid.cols, grid.spacing
        )));
    }
    let s = grid.spacing as f64;
    let axis = |p: usize| {
        let u = p as f64 / s;
        let k = u.floor();
        (k as usize, cubic_basis(u - k))
    };
    let cols: Vec<_> = (0..w).map(axis).collect();
    let mut dr = Vec::with_capacity(h * w);
    let mut dc = Vec::with_capacity(h * w);
    for r in 0..h {
        let (kr, br) = axis(r);
        for &(kc, bc) in &cols {
            let (mut vr, mut vc) = (0.0, 0.0);
            for (a, wa) in br.iter().enumerate() {
                for (b, wb) in bc.iter().enumerate() {
                    let (cr, cc) = grid.get(kr + a, kc + b);
                    let wt = wa * wb;
                    vr += wt * cr;
                    vc += wt * cc;
                }
            }
            dr.push(vr as f32);
            dc.push(vc as f32);
        }
    }
    DisplacementField::new(h, w, dr, dc)
}

/// Control grid whose coefficient components have magnitude drawn uniformly
/// from `[min_disp, max_disp]` with an independent random sign each.
pub fn random_bspline_grid(
    shape: (usize, usize),
    spacing: usize,
    min_disp: f64,
    max_disp: f64,
    seed: u64,
) -> Result<BSplineGrid> {
    if !(min_disp >= 0.0 && max_disp >= min_disp) {
        return Err(SarError::contract(format!(
            "displacement range [{min_disp}, {max_disp}] is invalid"
        )));
    }
    let mut grid = BSplineGrid::zeros(shape, spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let mag = if max_disp > min_disp {
            rng.gen_range(min_disp..=max_disp)
        } else {
            min_disp
        };
        if rng.gen::<bool>() {
            mag
        } else {
            -mag
        }
    };
    for c in grid.coeffs.iter_mut() {
        *c = (draw(&mut rng), draw(&mut rng));
    }
    Ok(grid)
}

/// Dense field of a random B-spline deformation (see [`random_bspline_grid`]).
pub fn random_elastic_deformation(
    shape: (usize, usize),
    spacing: usize,
    min_disp: f64,
    max_disp: f64,
    seed: u64,
) -> Result<DisplacementField> {
    let grid = random_bspline_grid(shape, spacing, min_disp, max_disp, seed)?;
    bspline_to_dense(&grid, shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Centred cubic B-spline kernel, evaluated directly.
    fn beta3(x: f64) -> f64 {
        let a = x.abs();
        if a < 1.0 {
            2.0 / 3.0 - a * a + a * a * a / 2.0
        } else if a < 2.0 {
            (2.0 - a).powi(3) / 6.0
        } else {
            0.0
        }
    }

    #[test]
    fn zero_coefficients_give_zero_field() {
        let g = BSplineGrid::zeros((20, 24), 5).unwrap();
        let f = bspline_to_dense(&g, (20, 24)).unwrap();
        assert_eq!(f, DisplacementField::zeros(20, 24));
    }

    #[test]
    fn partition_of_unity() {
        for &(h, w, s) in &[(64, 64, 16), (33, 17, 4), (8, 8, 2), (50, 40, 7)] {
            let (rows, cols) = BSplineGrid::required_dims((h, w), s);
            let g = BSplineGrid::new(s, rows, cols, vec![(3.25, -7.5); rows * cols]).unwrap();
            let f = bspline_to_dense(&g, (h, w)).unwrap();
            for i in 0..h * w {
                assert!((f.rows()[i] - 3.25).abs() < 1e-6);
                assert!((f.cols()[i] + 7.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_control_point_matches_direct_kernel() {
        let (h, w, s) = (40, 36, 8);
        let mut g = BSplineGrid::zeros((h, w), s).unwrap();
        let (i, j) = (3, 2);
        g.set(i, j, (2.0, -1.0));
        let f = bspline_to_dense(&g, (h, w)).unwrap();
        for r in 0..h {
            for c in 0..w {
                let k = beta3(r as f64 / s as f64 - (i as f64 - 1.0)) * beta3(c as f64 / s as f64 - (j as f64 - 1.0));
                let (vr, vc) = f.get(r, c);
                assert!((vr as f64 - 2.0 * k).abs() < 1e-6, "({r},{c})");
                assert!((vc as f64 + k).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn insufficient_coverage_is_rejected() {
        let g = BSplineGrid::new(16, 6, 7, vec![(0.0, 0.0); 42]).unwrap();
        assert!(matches!(bspline_to_dense(&g, (64, 64)), Err(SarError::Contract(_))));
        assert!(BSplineGrid::zeros((64, 64), 1).is_err());
    }

    #[test]
    fn random_grid_respects_bounds_and_seed() {
        for seed in 0..20 {
            let g = random_bspline_grid((64, 64), 16, 1.0, 20.0, seed).unwrap();
            for &(a, b) in g.coeffs() {
                for v in [a.abs(), b.abs()] {
                    assert!((1.0..=20.0).contains(&v));
                }
            }
        }
        let a = random_elastic_deformation((64, 64), 16, 1.0, 20.0, 9).unwrap();
        let b = random_elastic_deformation((64, 64), 16, 1.0, 20.0, 9).unwrap();
        assert_eq!(a, b);
        let z = random_elastic_deformation((64, 64), 16, 0.0, 0.0, 9).unwrap();
        assert_eq!(z.max_norm(), 0.0);
        assert!(random_elastic_deformation((64, 64), 16, 5.0, 1.0, 9).is_err());
    }
}
