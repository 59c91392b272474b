//! Backward-warping kernels with clamp-to-edge sampling.
//!
//! Output pixel `(r, c)` samples the source at `(r + dr, c + dc)`. Sample
//! coordinates outside the image are clamped to the nearest border pixel.

use crate::Real;

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    r0: usize,
    c0: usize,
    tr: T,
    tc: T,
    // d(clamped coordinate)/d(displacement): 1 inside, 0 where clamped.
    in_r: bool,
    in_c: bool,
}

#[inline]
fn axis<T: Real>(p: T, len: usize) -> (usize, T, bool) {
    let hi = T::from_usize(len - 1).unwrap();
    let inside = p >= T::zero() && p <= hi;
    let q = p.max(T::zero()).min(hi);
    if len == 1 {
        return (0, T::zero(), inside);
    }
    let mut i = q.floor().to_usize().unwrap();
    if i > len - 2 {
        i = len - 2;
    }
    (i, q - T::from_usize(i).unwrap(), inside)
}

#[inline]
fn tap<T: Real>(h: usize, w: usize, r: usize, c: usize, dr: T, dc: T) -> Tap<T> {
    let (r0, tr, in_r) = axis(T::from_usize(r).unwrap() + dr, h);
    let (c0, tc, in_c) = axis(T::from_usize(c).unwrap() + dc, w);
    Tap { r0, c0, tr, tc, in_r, in_c }
}

#[inline]
fn corners<T: Real>(img: &[T], w: usize, t: &Tap<T>, h: usize) -> [T; 4] {
    let r1 = if h > 1 { t.r0 + 1 } else { t.r0 };
    let c1 = if w > 1 { t.c0 + 1 } else { t.c0 };
    [
        img[t.r0 * w + t.c0],
        img[t.r0 * w + c1],
        img[r1 * w + t.c0],
        img[r1 * w + c1],
    ]
}

/// Bilinear sample of one plane at a fractional position (clamped).
pub fn sample_bilinear<T: Real>(img: &[T], h: usize, w: usize, r: T, c: T) -> T {
    let (r0, tr, _) = axis(r, h);
    let (c0, tc, _) = axis(c, w);
    let t = Tap { r0, c0, tr, tc, in_r: true, in_c: true };
    let [v00, v01, v10, v11] = corners(img, w, &t, h);
    let one = T::one();
    (one - tr) * ((one - tc) * v00 + tc * v01) + tr * ((one - tc) * v10 + tc * v11)
}

/// Warp one plane with bilinear interpolation.
pub fn warp_bilinear_plane<T: Real>(img: &[T], h: usize, w: usize, dr: &[T], dc: &[T], out: &mut [T]) {
    let one = T::one();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let t = tap(h, w, r, c, dr[i], dc[i]);
            let [v00, v01, v10, v11] = corners(img, w, &t, h);
            out[i] = (one - t.tr) * ((one - t.tc) * v00 + t.tc * v01)
                + t.tr * ((one - t.tc) * v10 + t.tc * v11);
        }
    }
}

/// Warp one plane with nearest-neighbour sampling.
pub fn warp_nearest_plane<T: Real>(img: &[T], h: usize, w: usize, dr: &[T], dc: &[T], out: &mut [T]) {
    let hi_r = T::from_usize(h - 1).unwrap();
    let hi_c = T::from_usize(w - 1).unwrap();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let pr = (T::from_usize(r).unwrap() + dr[i]).max(T::zero()).min(hi_r).round();
            let pc = (T::from_usize(c).unwrap() + dc[i]).max(T::zero()).min(hi_c).round();
            out[i] = img[pr.to_usize().unwrap() * w + pc.to_usize().unwrap()];
        }
    }
}

/// Adjoint of [`warp_bilinear_plane`]. Gradients are accumulated (`+=`).
#[allow(clippy::too_many_arguments)]
pub fn warp_bilinear_plane_backward<T: Real>(
    img: &[T],
    h: usize,
    w: usize,
    dr: &[T],
    dc: &[T],
    grad_out: &[T],
    mut grad_img: Option<&mut [T]>,
    mut grad_field: Option<(&mut [T], &mut [T])>,
) {
    let one = T::one();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let g = grad_out[i];
            if g == T::zero() {
                continue;
            }
            let t = tap(h, w, r, c, dr[i], dc[i]);
            if let Some(gi) = grad_img.as_deref_mut() {
                let r1 = if h > 1 { t.r0 + 1 } else { t.r0 };
                let c1 = if w > 1 { t.c0 + 1 } else { t.c0 };
                let add = |gi: &mut [T], idx: usize, wt: T| gi[idx] = gi[idx] + g * wt;
                add(gi, t.r0 * w + t.c0, (one - t.tr) * (one - t.tc));
                add(gi, t.r0 * w + c1, (one - t.tr) * t.tc);
                add(gi, r1 * w + t.c0, t.tr * (one - t.tc));
                add(gi, r1 * w + c1, t.tr * t.tc);
            }
            if let Some((gr, gc)) = grad_field.as_mut() {
                let [v00, v01, v10, v11] = corners(img, w, &t, h);
                if t.in_r {
                    let d = (one - t.tc) * (v10 - v00) + t.tc * (v11 - v01);
                    gr[i] = gr[i] + g * d;
                }
                if t.in_c {
                    let d = (one - t.tr) * (v01 - v00) + t.tr * (v11 - v10);
                    gc[i] = gc[i] + g * d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_identity() {
        let img: Vec<f32> = (0..30).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let z = vec![0.0f32; 30];
        let mut out = vec![0.0f32; 30];
        warp_bilinear_plane(&img, 5, 6, &z, &z, &mut out);
        assert_eq!(out, img);
        warp_nearest_plane(&img, 5, 6, &z, &z, &mut out);
        assert_eq!(out, img);
    }

    #[test]
    fn integer_shift_clamps_at_border() {
        let img: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let dr = vec![0.0; 16];
        let dc = vec![2.0; 16];
        let mut out = vec![0.0; 16];
        warp_bilinear_plane(&img, 4, 4, &dr, &dc, &mut out);
        assert_eq!(&out[0..4], &[2.0, 3.0, 3.0, 3.0]);
    }
}
