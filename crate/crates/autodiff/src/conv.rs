//! im2col based 2D convolution kernels (zero padding, square kernels).

use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix (`C * k * k`).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold one `[C, H, W]` sample into a `[C*k*k, Ho*Wo]` column matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), g.patch_len() * plane);
    let mut row = 0;
    for c in 0..g.channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into `[C, H, W]`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.channels {
        let dst = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            let d = &mut dst[base + ix as usize];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution of `[N, C, H, W]` with `[Co, C, k, k]` weights.
pub fn conv2d_forward<T: Real>(x: &[T], n: usize, g: &ConvGeom, w: &[T], co: usize) -> Vec<T> {
    let plane = g.out_height() * g.out_width();
    let kk = g.patch_len();
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); n * co * plane];
    let mut cols = vec![T::zero(); kk * plane];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        T::gemm(
            co,
            kk,
            plane,
            T::one(),
            w,
            kk as isize,
            1,
            &cols,
            plane as isize,
            1,
            T::zero(),
            &mut out[s * co * plane..(s + 1) * co * plane],
            plane as isize,
            1,
        );
    }
    out
}

/// Gradients of a convolution w.r.t. its input and weights. Either can be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    co: usize,
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_height() * g.out_width();
    let kk = g.patch_len();
    let in_len = g.channels * g.height * g.width;
    let mut gx = want_input.then(|| vec![T::zero(); n * in_len]);
    let mut gw = want_weight.then(|| vec![T::zero(); co * kk]);
    let mut cols = vec![T::zero(); kk * plane];
    let mut dcols = vec![T::zero(); kk * plane];
    for s in 0..n {
        let go = &grad_out[s * co * plane..(s + 1) * co * plane];
        if let Some(gw) = gw.as_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
            // gw += go * cols^T
            T::gemm(
                co,
                plane,
                kk,
                T::one(),
                go,
                plane as isize,
                1,
                &cols,
                1,
                plane as isize,
                T::one(),
                gw,
                kk as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            // dcols = w^T * go
            T::gemm(
                kk,
                co,
                plane,
                T::one(),
                w,
                1,
                kk as isize,
                go,
                plane as isize,
                1,
                T::zero(),
                &mut dcols,
                plane as isize,
                1,
            );
            col2im(&dcols, g, &mut gx[s * in_len..(s + 1) * in_len]);
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], g: &ConvGeom, w: &[f64], co: usize) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * w[((o * g.channels + c) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loop() {
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let g = ConvGeom { channels: 3, height: 7, width: 6, kernel: 3, stride, pad };
            let x: Vec<f64> = (0..3 * 7 * 6).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.4).collect();
            let w: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.5).collect();
            let fast = conv2d_forward(&x, 1, &g, &w, 4);
            let slow = direct_conv(&x, &g, &w, 4);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
