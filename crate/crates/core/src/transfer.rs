//! Per-pair registration with a trained model, optionally adapting only
//! the field head of the forward generator to the new pair.

use std::fs;
use std::path::Path;
use std::time::Instant;

use sarreg_autodiff::{AdamConfig, Graph};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::imagecore::io::{save_field, save_image, save_mask, save_overlay, BitDepth};
use crate::imagecore::{DisplacementField, Image, SegMask};
use crate::losses::{objective_graph, Objective, PairBatch};
use crate::metrics::MetricReport;
use crate::networks::{generator_forward, Binder, ModelParams, Optimizer, Phase, LAST_LAYER};
use crate::perceptual::FeatureExtractor;

/// Same first-moment decay as training.
const FINETUNE_BETA1: f64 = 0.93;

/// Ground-truth masks of a pair, in floating then reference order.
#[derive(Clone, Copy, Debug)]
pub struct PairMasks<'a> {
    pub flt: &'a SegMask,
    pub reference: &'a SegMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub rel_tol: f64,
    pub max_iters: usize,
    pub min_iters: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            rel_tol: 0.01,
            max_iters: 30,
            min_iters: 1,
            lr: 1e-4,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(SarError::Config("rel_tol must lie in (0, 1)".into()));
        }
        if self.min_iters == 0 || self.max_iters < self.min_iters {
            return Err(SarError::Config("need max_iters >= min_iters >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(SarError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// Whether a loss trace (one entry per iteration so far) has converged.
    pub fn should_stop(&self, trace: &[f64]) -> bool {
        let t = trace.len();
        if t >= self.max_iters {
            return true;
        }
        if t < self.min_iters || t < 2 {
            return false;
        }
        let (prev, cur) = (trace[t - 2], trace[t - 1]);
        (cur - prev).abs() / prev.abs().max(f64::EPSILON) < self.rel_tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub trans: Image,
    pub def_recv: DisplacementField,
    pub seg_trans: SegMask,
    pub seg_ref: SegMask,
    pub loss_trace: Vec<f64>,
    pub iters_used: usize,
    pub runtime_s: f64,
    /// A non-finite loss ended fine-tuning early.
    pub degraded: bool,
    pub metrics: Option<MetricReport>,
}

fn check_inputs(params: &ModelParams, flt: &Image, ref_img: &Image, masks: Option<PairMasks>) -> Result<()> {
    if flt.shape() != ref_img.shape() {
        return Err(SarError::contract("floating and reference images differ in shape; resample first"));
    }
    if let Some(m) = masks {
        if m.flt.shape() != flt.shape() || m.reference.shape() != flt.shape() {
            return Err(SarError::contract("mask shapes differ from the images"));
        }
    }
    if (params.config.height, params.config.width) != flt.shape() {
        return Err(SarError::contract(format!(
            "model expects {}x{} images",
            params.config.height, params.config.width
        )));
    }
    Ok(())
}

fn finish(
    params: &ModelParams,
    flt: &Image,
    ref_img: &Image,
    masks: Option<PairMasks>,
    loss_trace: Vec<f64>,
    degraded: bool,
    start: Instant,
) -> Result<RegistrationResult> {
    let out = generator_forward(params, flt, ref_img, masks.map(|m| m.flt))?;
    let seg_ref = masks.map_or(out.seg_ref, |m| m.reference.clone());
    let runtime_s = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    let metrics = masks
        .map(|m| MetricReport::evaluate("pair", ref_img, &out.trans, m.reference, &out.seg_trans, 1.0, runtime_s))
        .transpose()?;
    Ok(RegistrationResult {
        trans: out.trans,
        def_recv: out.def_recv,
        seg_trans: out.seg_trans,
        seg_ref,
        iters_used: loss_trace.len(),
        loss_trace,
        runtime_s,
        degraded,
        metrics,
    })
}

/// Single inference pass with the trained model.
pub fn register_frozen(
    trained: &ModelParams,
    flt: &Image,
    ref_img: &Image,
    masks: Option<PairMasks>,
) -> Result<RegistrationResult> {
    check_inputs(trained, flt, ref_img, masks)?;
    finish(trained, flt, ref_img, masks, Vec::new(), false, Instant::now())
}

/// Fine-tune a private copy of `trained` on one pair. Only the forward
/// generator's field head is updated, on the adversarial and mask-overlap
/// terms. Each iteration evaluates the loss at the current weights, then
/// steps; the weights with the lowest recorded loss are returned. Without
/// ground-truth masks, masks come from the generators' fused maps.
pub fn finetune_register(
    trained: &ModelParams,
    extractor: &FeatureExtractor,
    flt: &Image,
    ref_img: &Image,
    cfg: &FinetuneConfig,
    masks: Option<PairMasks>,
) -> Result<RegistrationResult> {
    finetune_model(trained, extractor, flt, ref_img, cfg, masks).map(|(_, r)| r)
}

/// As [`finetune_register`], also returning the adapted model.
pub fn finetune_model(
    trained: &ModelParams,
    extractor: &FeatureExtractor,
    flt: &Image,
    ref_img: &Image,
    cfg: &FinetuneConfig,
    masks: Option<PairMasks>,
) -> Result<(ModelParams, RegistrationResult)> {
    cfg.validate()?;
    check_inputs(trained, flt, ref_img, masks)?;
    let start = Instant::now();
    let mut params = trained.clone();
    params.store.freeze_all_except(LAST_LAYER);
    let mut opt = Optimizer::new(AdamConfig {
        lr: cfg.lr,
        beta1: FINETUNE_BETA1,
        ..AdamConfig::default()
    });
    let head: Vec<String> = params
        .store
        .names()
        .filter(|n| n.starts_with(&format!("{LAST_LAYER}.")))
        .map(String::from)
        .collect();
    let snapshot = |p: &ModelParams| head.iter().map(|n| p.store.expect(n).clone()).collect::<Vec<_>>();
    let mut best = (f64::INFINITY, snapshot(&params));
    let mut trace = Vec::new();
    let mut degraded = false;
    loop {
        let graph = Graph::new();
        let b = Binder::new(&params.store, &graph, Phase::Eval);
        let batch = PairBatch {
            flt: graph.constant(flt.to_tensor()),
            reference: graph.constant(ref_img.to_tensor()),
            flt_seg: masks.map(|m| graph.constant(m.flt.to_tensor())),
            ref_seg: masks.map(|m| graph.constant(m.reference.to_tensor())),
            fields: None,
            critic_fields: false,
        };
        let obj = objective_graph(&b, &params, extractor, &batch, Objective::Transfer)?;
        let loss = obj.terms.total();
        let value = loss.item() as f64;
        if !value.is_finite() {
            log::warn!("non-finite fine-tuning loss at iteration {}", trace.len() + 1);
            degraded = true;
            break;
        }
        trace.push(value);
        if value < best.0 {
            best = (value, snapshot(&params));
        }
        if cfg.should_stop(&trace) {
            break;
        }
        let grads = graph.backward(loss);
        let grads = b.gradients(&grads, LAST_LAYER);
        drop(b);
        opt.step(&mut params.store, &grads);
    }
    for (name, t) in head.iter().zip(best.1) {
        *params.store.get_mut(name).expect("head tensor") = t;
    }
    let result = finish(&params, flt, ref_img, masks, trace, degraded, start)?;
    Ok((params, result))
}

/// Write a result as images, tensors and CSV files under `dir`.
pub fn write_result(result: &RegistrationResult, ref_img: &Image, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_image(&result.trans, &dir.join("trans.png"), BitDepth::Sixteen)?;
    save_field(&result.def_recv, &dir.join("def_recv.sart"))?;
    save_mask(&result.seg_trans, &dir.join("seg_trans.sart"))?;
    save_mask(&result.seg_ref, &dir.join("seg_ref.sart"))?;
    let mut wtr = csv::Writer::from_path(dir.join("loss_trace.csv"))?;
    wtr.write_record(["iteration", "loss"])?;
    for (i, l) in result.loss_trace.iter().enumerate() {
        wtr.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    wtr.flush()?;
    if let Some(m) = &result.metrics {
        MetricReport::write_csv(std::slice::from_ref(m), fs::File::create(dir.join("metrics.csv"))?)?;
    }
    save_overlay(ref_img, &result.seg_ref, &result.seg_trans, &dir.join("overlay.png"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;
    use crate::perceptual::ExtractorConfig;

    fn blob(shift: f64) -> (Image, SegMask) {
        let inside = |r: usize, c: usize| (r as f64 - 8.0 - shift).powi(2) / 25.0 + (c as f64 - 8.0).powi(2) / 16.0 <= 1.0;
        (
            Image::from_fn(16, 16, |r, c| if inside(r, c) { 0.8 } else { 0.2 }).unwrap(),
            SegMask::from_fn(16, 16, inside),
        )
    }

    #[test]
    fn stopping_rule() {
        let cfg = FinetuneConfig::default();
        let mut trace = vec![10.0, 9.0, 8.0, 7.0];
        assert!(!cfg.should_stop(&trace));
        trace.push(7.0 * (1.0 - 0.009));
        assert!(cfg.should_stop(&trace));
        assert_eq!(trace.len(), 5);
        assert!(!cfg.should_stop(&[1.0]));
        let long: Vec<f64> = (0..30).map(|i| 100.0 / (i + 1) as f64).collect();
        assert!(!cfg.should_stop(&long[..29]));
        assert!(cfg.should_stop(&long));
        let strict = FinetuneConfig { min_iters: 4, ..cfg };
        assert!(!strict.should_stop(&[1.0, 1.0, 1.0]));
    }

    #[test]
    fn finetune_touches_only_the_head() {
        let p = ModelParams::init(ModelConfig::desk(16, 16), 3).unwrap();
        let ex = FeatureExtractor::seeded(ExtractorConfig::desk_scale(0));
        let ((flt, fseg), (ref_img, rseg)) = (blob(2.0), blob(0.0));
        let masks = PairMasks {
            flt: &fseg,
            reference: &rseg,
        };
        let cfg = FinetuneConfig {
            max_iters: 5,
            ..FinetuneConfig::default()
        };
        let r = finetune_register(&p, &ex, &flt, &ref_img, &cfg, Some(masks)).unwrap();
        assert!(r.iters_used >= 1 && r.iters_used <= 5);
        assert_eq!(r.loss_trace.len(), r.iters_used);
        assert!(r.metrics.is_some() && !r.degraded);
        let frozen = register_frozen(&p, &flt, &ref_img, Some(masks)).unwrap();
        assert_eq!(frozen.iters_used, 0);
        assert!(frozen.runtime_s > 0.0);
        assert_eq!(frozen.trans, flt);
        let best = r.loss_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        if best == r.loss_trace[0] {
            assert_eq!(r.trans, frozen.trans);
        }
    }

    #[test]
    fn result_directory_is_complete() {
        let p = ModelParams::init(ModelConfig::desk(16, 16), 3).unwrap();
        let ((flt, fseg), (ref_img, rseg)) = (blob(1.0), blob(0.0));
        let r = register_frozen(
            &p,
            &flt,
            &ref_img,
            Some(PairMasks {
                flt: &fseg,
                reference: &rseg,
            }),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_result(&r, &ref_img, dir.path()).unwrap();
        for f in ["trans.png", "def_recv.sart", "seg_trans.sart", "seg_ref.sart", "loss_trace.csv", "metrics.csv", "overlay.png"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
