//! Otsu thresholding and fusion of convolution maps into masks.

use sarreg_autodiff::{Real, Var};

use crate::error::{Result, SarError};
use crate::imagecore::SegMask;

pub const OTSU_BINS: usize = 256;

/// Histogram bin of a value in `[0, 1]`.
pub fn otsu_bin(v: f64) -> usize {
    ((v * OTSU_BINS as f64).floor().max(0.0) as usize).min(OTSU_BINS - 1)
}

/// Highest bin index of the background class, or `None` when no split
/// leaves both classes non-empty. Ties go to the lowest bin.
pub fn otsu_split(values: &[f64]) -> Option<usize> {
    let mut hist = [0usize; OTSU_BINS];
    for &v in values {
        hist[otsu_bin(v)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut count0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for (k, &n) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        count0 += n as f64;
        sum0 += k as f64 * n as f64;
        let count1 = total - count0;
        if count0 == 0.0 || count1 == 0.0 {
            continue;
        }
        let (w0, w1) = (count0 / total, count1 / total);
        let diff = sum0 / count0 - (sum_all - sum0) / count1;
        let var = w0 * w1 * diff * diff;
        if best.map_or(true, |(_, b)| var > b) {
            best = Some((k, var));
        }
    }
    best.map(|(k, _)| k)
}

/// Threshold value separating the classes of [`otsu_split`]: a pixel is
/// foreground when it lands above the split bin, i.e. `v >= threshold`.
pub fn split_threshold(k: usize) -> f64 {
    (k + 1) as f64 / OTSU_BINS as f64
}

/// Binarize a `[0, 1]` map by Otsu's between-class variance criterion. A map
/// with all values in one bin yields an empty mask.
pub fn otsu_threshold(map: &[f64], height: usize, width: usize) -> Result<SegMask> {
    if map.len() != height * width {
        return Err(SarError::contract("map does not match mask shape"));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(SarError::contract("non-finite value in threshold map"));
    }
    let pixels = match otsu_split(map) {
        Some(k) => map.iter().map(|&v| (otsu_bin(v) > k) as u8).collect(),
        None => vec![0; map.len()],
    };
    SegMask::new(height, width, pixels)
}

/// Weighted sum of channel-averaged, min-max normalized maps, upsampled to
/// `height x width` and normalized again. Maps are `[N, C, h, w]` with `h`
/// dividing `height`; `weights` is `[L]`.
pub fn fuse_maps<'g, T: Real>(maps: &[Var<'g, T>], weights: Var<'g, T>, height: usize) -> Var<'g, T> {
    assert!(!maps.is_empty(), "fusion needs at least one map");
    let mut fused: Option<Var<'g, T>> = None;
    for (l, &m) in maps.iter().enumerate() {
        let h = m.shape()[2];
        let mut term = m.mean_channels().min_max_normalize();
        if h != height {
            term = term.upsample_nearest(height / h);
        }
        let term = term.scale_by(weights.element(l));
        fused = Some(match fused {
            Some(f) => f + term,
            None => term,
        });
    }
    fused.unwrap().min_max_normalize()
}

/// Otsu masks of each sample in a fused `[N, 1, H, W]` map, with the split
/// threshold (`None` for degenerate maps).
pub fn masks_from_fused<T: Real>(fused: &Var<'_, T>) -> Result<Vec<(SegMask, Option<f64>)>> {
    let v = fused.value();
    let [n, _, h, w] = v.dims4();
    (0..n)
        .map(|s| {
            let vals: Vec<f64> = v.data()[s * h * w..(s + 1) * h * w]
                .iter()
                .map(|x| x.to_f64().unwrap())
                .collect();
            let mask = otsu_threshold(&vals, h, w)?;
            Ok((mask, otsu_split(&vals).map(split_threshold)))
        })
        .collect()
}
