//! Evaluation metrics: NMI, SSIM, Dice, HD95, MAD and normalized field MSE.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::imagecore::{DisplacementField, Image, SegMask};

pub const NMI_BINS: usize = 64;

fn same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(SarError::contract(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn entropy(counts: &[f64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum()
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((v as f64 * bins as f64).floor() as usize).min(bins - 1)
}

/// Normalized mutual information `(H(A) + H(B)) / H(A, B)` from a hard-binned
/// joint histogram, rescaled from `[1, 2]` to `[0, 1]`.
pub fn nmi(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    same_shape(a.shape(), b.shape(), "nmi")?;
    if bins == 0 {
        return Err(SarError::contract("nmi needs at least one bin"));
    }
    let mut joint = vec![0.0f64; bins * bins];
    let mut ha = vec![0.0f64; bins];
    let mut hb = vec![0.0f64; bins];
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let (i, j) = (bin_of(x, bins), bin_of(y, bins));
        joint[i * bins + j] += 1.0;
        ha[i] += 1.0;
        hb[j] += 1.0;
    }
    let n = a.pixels().len() as f64;
    let hab = entropy(&joint, n);
    if hab <= 0.0 {
        let same = a.pixels().iter().zip(b.pixels()).all(|(&x, &y)| bin_of(x, bins) == bin_of(y, bins));
        return Ok(if same { 1.0 } else { 0.0 });
    }
    let ratio = (entropy(&ha, n) + entropy(&hb, n)) / hab;
    Ok((ratio - 1.0).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub stride: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 8,
            stride: 4,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Mean structural similarity over square windows.
pub fn ssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    same_shape(a.shape(), b.shape(), "ssim")?;
    let (h, w) = a.shape();
    if h < p.window || w < p.window {
        return Err(SarError::contract("image smaller than the SSIM window"));
    }
    let (c1, c2) = (p.c1(), p.c2());
    let n = (p.window * p.window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in (0..=h - p.window).step_by(p.stride) {
        for c0 in (0..=w - p.window).step_by(p.stride) {
            let (mut sa, mut sb) = (0.0, 0.0);
            for r in r0..r0 + p.window {
                for c in c0..c0 + p.window {
                    sa += a.get(r, c) as f64;
                    sb += b.get(r, c) as f64;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for r in r0..r0 + p.window {
                for c in c0..c0 + p.window {
                    let da = a.get(r, c) as f64 - ma;
                    let db = b.get(r, c) as f64 - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// Dice overlap `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(m1: &SegMask, m2: &SegMask) -> Result<f64> {
    same_shape(m1.shape(), m2.shape(), "dice")?;
    let (mut inter, mut s1, mut s2) = (0usize, 0usize, 0usize);
    for (&a, &b) in m1.pixels().iter().zip(m2.pixels()) {
        inter += (a & b) as usize;
        s1 += a as usize;
        s2 += b as usize;
    }
    if s1 + s2 == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (s1 + s2) as f64)
}

/// Exact squared Euclidean distance transform to a set of seed pixels
/// (separable lower-envelope algorithm).
fn squared_edt(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut grid = vec![INF; h * w];
    for &(r, c) in seeds {
        grid[r * w + c] = 0.0;
    }
    let mut buf = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            buf[r] = grid[r * w + c];
        }
        let out = edt_1d(&buf[..h]);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        let out = edt_1d(&grid[r * w..(r + 1) * w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&out);
    }
    grid
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the only parabola
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// Distances from each boundary pixel of `from` to the nearest boundary pixel of `to`.
fn directed_boundary_distances(from: &SegMask, to: &SegMask) -> Vec<f64> {
    let (h, w) = to.shape();
    let dt = squared_edt(h, w, &to.boundary());
    from.boundary().iter().map(|&(r, c)| dt[r * w + c].sqrt()).collect()
}

fn non_empty_pair(m1: &SegMask, m2: &SegMask, what: &str) -> Result<()> {
    same_shape(m1.shape(), m2.shape(), what)?;
    if m1.is_empty() || m2.is_empty() {
        return Err(SarError::degenerate(format!("{what} of an empty mask")));
    }
    Ok(())
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = rank - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// 95th percentile of the pooled symmetric boundary-to-boundary distances.
pub fn hausdorff95(m1: &SegMask, m2: &SegMask) -> Result<f64> {
    non_empty_pair(m1, m2, "hausdorff95")?;
    let mut all = directed_boundary_distances(m1, m2);
    all.extend(directed_boundary_distances(m2, m1));
    Ok(percentile(&mut all, 0.95))
}

/// Symmetric mean boundary distance.
pub fn mad(m1: &SegMask, m2: &SegMask) -> Result<f64> {
    non_empty_pair(m1, m2, "mad")?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(directed_boundary_distances(m1, m2)) + mean(directed_boundary_distances(m2, m1))))
}

/// Mean squared component difference scaled by `(2 d_max)^2`, clamped to `[0, 1]`.
pub fn mse_norm(f1: &DisplacementField, f2: &DisplacementField, d_max: f64) -> Result<f64> {
    same_shape(f1.shape(), f2.shape(), "mse_norm")?;
    if !(d_max > 0.0) {
        return Err(SarError::contract("mse_norm needs d_max > 0"));
    }
    let mut sum = 0.0;
    for (a, b) in f1.rows().iter().zip(f2.rows()).chain(f1.cols().iter().zip(f2.cols())) {
        let d = (*a - *b) as f64;
        sum += d * d;
    }
    let mse = sum / (2 * f1.rows().len()) as f64;
    Ok((mse / (2.0 * d_max).powi(2)).clamp(0.0, 1.0))
}

/// One evaluated registration case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_id: String,
    pub dice: f64,
    pub hd95: f64,
    pub mad: f64,
    pub nmi: f64,
    pub ssim: f64,
    pub runtime_s: f64,
}

impl MetricReport {
    /// Score a registered image/mask pair against its reference. Distances
    /// are multiplied by `pixel_spacing_mm`.
    pub fn evaluate(
        case_id: impl Into<String>,
        ref_img: &Image,
        trans: &Image,
        ref_seg: &SegMask,
        trans_seg: &SegMask,
        pixel_spacing_mm: f64,
        runtime_s: f64,
    ) -> Result<Self> {
        Ok(Self {
            case_id: case_id.into(),
            dice: dice(ref_seg, trans_seg)?,
            hd95: hausdorff95(ref_seg, trans_seg)? * pixel_spacing_mm,
            mad: mad(ref_seg, trans_seg)? * pixel_spacing_mm,
            nmi: nmi(ref_img, trans, NMI_BINS)?,
            ssim: ssim(ref_img, trans, &SsimParams::default())?,
            runtime_s,
        })
    }

    pub fn write_csv<W: std::io::Write>(rows: &[MetricReport], out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for r in rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricReport>> {
        let mut rdr = csv::Reader::from_reader(input);
        rdr.deserialize().map(|r| r.map_err(Into::into)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> SegMask {
        SegMask::from_fn(h, w, |r, c| (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c))
    }

    fn disk(h: usize, w: usize, cr: f64, cc: f64, rad: f64) -> SegMask {
        SegMask::from_fn(h, w, |r, c| (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= rad * rad)
    }

    #[test]
    fn nmi_identity_shuffle_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Image::from_fn(128, 128, |_, _| rng.gen::<f32>()).unwrap();
        assert!((nmi(&a, &a, 64).unwrap() - 1.0).abs() < 1e-12);
        let mut px = a.pixels().to_vec();
        px.shuffle(&mut rng);
        let s = Image::new(128, 128, px).unwrap();
        assert!(nmi(&a, &s, 64).unwrap() <= 0.05);
        let c = Image::constant(8, 8, 0.3).unwrap();
        assert_eq!(nmi(&c, &c, 64).unwrap(), 1.0);
        let d = Image::constant(8, 8, 0.9).unwrap();
        assert_eq!(nmi(&c, &d, 64).unwrap(), 0.0);
    }

    #[test]
    fn ssim_constants_closed_form() {
        let a = Image::constant(16, 16, 0.2).unwrap();
        let b = Image::constant(16, 16, 0.8).unwrap();
        let p = SsimParams::default();
        let c1 = p.c1();
        let expected = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
        assert!((ssim(&a, &b, &p).unwrap() - expected).abs() < 1e-6);
        assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dice_counting() {
        let m1 = square(10, 10, 0, 0, 2);
        let m2 = SegMask::from_fn(10, 10, |r, c| r < 2 && c < 4);
        assert!((dice(&m1, &m2).unwrap() - 2.0 * 4.0 / 12.0).abs() < 1e-12);
        assert_eq!(dice(&m1, &m1).unwrap(), 1.0);
        assert_eq!(dice(&m1, &square(10, 10, 5, 5, 3)).unwrap(), 0.0);
        assert_eq!(dice(&SegMask::empty(4, 4), &SegMask::empty(4, 4)).unwrap(), 1.0);
    }

    #[test]
    fn hd95_of_shifted_square() {
        let a = square(32, 32, 8, 8, 10);
        let b = square(32, 32, 8, 11, 10);
        assert!((hausdorff95(&a, &b).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(hausdorff95(&a, &a).unwrap(), 0.0);
        assert!(matches!(hausdorff95(&a, &SegMask::empty(32, 32)), Err(SarError::Degenerate(_))));
    }

    #[test]
    fn mad_of_concentric_disks() {
        let a = disk(48, 48, 24.0, 24.0, 10.0);
        let b = disk(48, 48, 24.0, 24.0, 12.0);
        let v = mad(&a, &b).unwrap();
        assert!((v - 2.0).abs() <= 0.3, "{v}");
        assert_eq!(mad(&a, &a).unwrap(), 0.0);
        assert!((mad(&a, &b).unwrap() - mad(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mse_norm_arithmetic() {
        let z = DisplacementField::zeros(8, 8);
        let c = DisplacementField::constant(8, 8, 20.0, 20.0);
        assert!((mse_norm(&z, &c, 20.0).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(mse_norm(&c, &c, 20.0).unwrap(), 0.0);
        let far = DisplacementField::constant(8, 8, 500.0, -500.0);
        assert_eq!(mse_norm(&z, &far, 20.0).unwrap(), 1.0);
        assert!(mse_norm(&z, &c, 0.0).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(1..15), rng.gen_range(1..15));
            let seeds: Vec<_> = (0..rng.gen_range(1..6)).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect();
            let dt = squared_edt(h, w, &seeds);
            for r in 0..h {
                for c in 0..w {
                    let best = seeds
                        .iter()
                        .map(|&(a, b)| (r as f64 - a as f64).powi(2) + (c as f64 - b as f64).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!(dt[r * w + c], best);
                }
            }
        }
    }

    #[test]
    fn report_csv_roundtrip() {
        let rows = vec![MetricReport {
            case_id: "p01_v2".into(),
            dice: 0.81,
            hd95: 3.5,
            mad: 1.25,
            nmi: 0.4,
            ssim: 0.9,
            runtime_s: 0.02,
        }];
        let mut buf = Vec::new();
        MetricReport::write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("case_id,dice,hd95,mad,nmi,ssim,runtime_s\n"));
        assert_eq!(MetricReport::read_csv(&buf[..]).unwrap(), rows);
    }
}
