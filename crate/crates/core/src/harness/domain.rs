//! Procedural stand-in domains: chest-like paired ellipses and brain-like
//! rings with a ventricle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::imagecore::io::{load_image, load_mask, save_image, save_mask, BitDepth};
use crate::imagecore::{Image, SegMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Two dark lung fields inside a body outline; the mask covers both lungs.
    Lung,
    /// Skull ring around brain tissue with a dark ventricle; the mask is the
    /// tissue between the ring and the ventricle.
    Brain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureParams {
    /// Amplitude of the smooth low-frequency shading.
    pub shading: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            shading: 0.08,
            noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub family: ShapeFamily,
    pub size: usize,
    pub patients: usize,
    pub images_per_patient: usize,
    #[serde(default)]
    pub texture: TextureParams,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patients < 2 {
            return Err(SarError::Config("a domain needs at least two patients".into()));
        }
        if self.size < 16 || self.size % 4 != 0 {
            return Err(SarError::Config(format!("domain size {} must be >= 16 and divisible by 4", self.size)));
        }
        if self.images_per_patient == 0 {
            return Err(SarError::Config("images_per_patient must be positive".into()));
        }
        Ok(())
    }
}

/// One image with its mask and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub patient_id: String,
    pub visit: usize,
    pub image: Image,
    pub mask: SegMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub visit: usize,
    pub image: String,
    pub mask: String,
}

/// Anatomy of one patient; visits perturb it slightly.
#[derive(Clone, Copy, Debug)]
struct Anatomy {
    center: (f64, f64),
    radii: (f64, f64),
    inner: (f64, f64),
    gap: f64,
    tilt: f64,
}

fn draw_anatomy(rng: &mut ChaCha8Rng, n: f64) -> Anatomy {
    let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.gen_range(lo..hi);
    Anatomy {
        center: (n * u(rng, 0.46, 0.54), n * u(rng, 0.46, 0.54)),
        radii: (n * u(rng, 0.36, 0.42), n * u(rng, 0.34, 0.40)),
        inner: (n * u(rng, 0.22, 0.30), n * u(rng, 0.10, 0.14)),
        gap: n * u(rng, 0.04, 0.08),
        tilt: u(rng, -0.15, 0.15),
    }
}

fn jitter(a: &Anatomy, rng: &mut ChaCha8Rng, n: f64) -> Anatomy {
    let mut j = |s: f64| rng.gen_range(-s..s);
    Anatomy {
        center: (a.center.0 + n * j(0.02), a.center.1 + n * j(0.02)),
        radii: (a.radii.0 * (1.0 + j(0.04)), a.radii.1 * (1.0 + j(0.04))),
        inner: (a.inner.0 * (1.0 + j(0.08)), a.inner.1 * (1.0 + j(0.08))),
        gap: a.gap * (1.0 + j(0.1)),
        tilt: a.tilt + j(0.05),
    }
}

fn in_ellipse(p: (f64, f64), c: (f64, f64), r: (f64, f64), tilt: f64) -> bool {
    let (dy, dx) = (p.0 - c.0, p.1 - c.1);
    let (s, co) = tilt.sin_cos();
    let (u, v) = (co * dy - s * dx, s * dy + co * dx);
    (u / r.0).powi(2) + (v / r.1).powi(2) <= 1.0
}

/// Intensity and mask membership of one pixel.
fn render_pixel(family: ShapeFamily, a: &Anatomy, p: (f64, f64)) -> (f64, bool) {
    match family {
        ShapeFamily::Lung => {
            if !in_ellipse(p, a.center, a.radii, a.tilt) {
                return (0.05, false);
            }
            let off = a.gap / 2.0 + a.inner.1;
            let (s, c) = a.tilt.sin_cos();
            let lung = [-1.0, 1.0].into_iter().any(|side: f64| {
                let centre = (a.center.0 - side * off * s, a.center.1 + side * off * c);
                in_ellipse(p, centre, a.inner, a.tilt)
            });
            if lung {
                (0.2, true)
            } else {
                (0.6, false)
            }
        }
        ShapeFamily::Brain => {
            if !in_ellipse(p, a.center, a.radii, a.tilt) {
                return (0.0, false);
            }
            let skull = (a.radii.0 - a.gap, a.radii.1 - a.gap);
            if !in_ellipse(p, a.center, skull, a.tilt) {
                return (0.9, false);
            }
            let ventricle = (a.inner.0 * 0.6, a.inner.1);
            if in_ellipse(p, a.center, ventricle, a.tilt) {
                (0.15, false)
            } else {
                (0.5, true)
            }
        }
    }
}

fn render(spec: &DomainSpec, a: &Anatomy, rng: &mut ChaCha8Rng) -> Result<(Image, SegMask)> {
    let n = spec.size;
    let phases: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let noise = Normal::new(0.0, spec.texture.noise.max(0.0)).map_err(|e| SarError::Config(e.to_string()))?;
    let mut mask = vec![0u8; n * n];
    let mut pixels = vec![0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let p = (r as f64 + 0.5, c as f64 + 0.5);
            let (v, inside) = render_pixel(spec.family, a, p);
            let (y, x) = (p.0 / n as f64, p.1 / n as f64);
            let shade = spec.texture.shading
                * 0.5
                * ((3.0 * y + phases[0]).sin() * (2.0 * x + phases[1]).cos() + (5.0 * x + 4.0 * y + phases[2]).sin() * 0.5);
            let v = v + if v > 0.1 { shade } else { 0.0 } + noise.sample(rng);
            pixels[r * n + c] = v.clamp(0.0, 1.0) as f32;
            mask[r * n + c] = inside as u8;
        }
    }
    Ok((Image::new(n, n, pixels)?, SegMask::new(n, n, mask)?))
}

/// All cases of a domain, in patient-then-visit order.
pub fn generate_cases(spec: &DomainSpec) -> Result<Vec<Case>> {
    spec.validate()?;
    let n = spec.size as f64;
    let mut cases = Vec::with_capacity(spec.patients * spec.images_per_patient);
    for patient in 0..spec.patients {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(patient as u64));
        let base = draw_anatomy(&mut rng, n);
        for visit in 0..spec.images_per_patient {
            let anatomy = if visit == 0 { base } else { jitter(&base, &mut rng, n) };
            let (image, mask) = render(spec, &anatomy, &mut rng)?;
            if mask.is_empty() {
                return Err(SarError::degenerate(format!("patient {patient} visit {visit} has an empty mask")));
            }
            cases.push(Case {
                patient_id: format!("{}_{patient:03}", spec.name),
                visit,
                image,
                mask,
            });
        }
    }
    Ok(cases)
}

/// Write a domain as `images/*.png`, `masks/*.sart` and `manifest.csv`
/// under `out`, returning the manifest rows.
pub fn synth_domain(spec: &DomainSpec, out: &Path) -> Result<Vec<ManifestRow>> {
    let cases = generate_cases(spec)?;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;
    let mut rows = Vec::with_capacity(cases.len());
    for case in &cases {
        let stem = format!("{}_v{}", case.patient_id, case.visit);
        let image = format!("images/{stem}.png");
        let mask = format!("masks/{stem}.sart");
        save_image(&case.image, &out.join(&image), BitDepth::Sixteen)?;
        save_mask(&case.mask, &out.join(&mask))?;
        rows.push(ManifestRow {
            patient_id: case.patient_id.clone(),
            visit: case.visit,
            image,
            mask,
        });
    }
    let mut wtr = csv::Writer::from_path(out.join("manifest.csv"))?;
    for r in &rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    fs::write(out.join("domain.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(rows)
}

/// Read a dataset laid out as `manifest.csv` plus the image and mask files
/// it names (paths relative to `dir`).
pub fn load_domain(dir: &Path) -> Result<Vec<Case>> {
    let manifest: PathBuf = dir.join("manifest.csv");
    let mut rdr = csv::Reader::from_path(&manifest)?;
    let mut cases = Vec::new();
    for row in rdr.deserialize() {
        let row: ManifestRow = row?;
        let image = load_image(&dir.join(&row.image))?;
        let mask = load_mask(&dir.join(&row.mask))?;
        if image.shape() != mask.shape() {
            return Err(SarError::Format {
                path: manifest.clone(),
                reason: format!("image and mask of {} differ in shape", row.image),
            });
        }
        cases.push(Case {
            patient_id: row.patient_id,
            visit: row.visit,
            image,
            mask,
        });
    }
    Ok(cases)
}
