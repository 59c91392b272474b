//! Synthetic training pairs, patient-level splits and the alternating
//! adversarial training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarreg_autodiff::{AdamConfig, BnStats, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::harness::Case;
use crate::imagecore::{
    affine_align, invert_field, random_elastic_deformation, warp, warp_mask, AffineTransform, DisplacementField, Image,
    InterpMode, SegMask,
};
use crate::losses::{critic_objective, objective_graph, LossBreakdown, Objective, PairBatch};
use crate::networks::{generator_graph, Binder, ModelParams, Optimizer, Phase};
use crate::perceptual::FeatureExtractor;

/// Fixed-point iterations used to invert applied fields.
const INVERSE_ITERS: usize = 20;

/// How synthetic deformations are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    /// Control-point spacing in pixels.
    pub spacing: usize,
    pub min_disp: f64,
    pub max_disp: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            spacing: 16,
            min_disp: 1.0,
            max_disp: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub ref_img: Image,
    pub ref_seg: SegMask,
    pub flt: Image,
    pub flt_seg: SegMask,
    /// Field that produced `flt` from the aligned partner.
    pub def_app: DisplacementField,
    /// Approximate inverse of `def_app`; the field that registers `flt`
    /// back onto the partner.
    pub def_inv: DisplacementField,
    /// Affine alignment failed and the partner was used unaligned.
    pub affine_fallback: bool,
}

/// Align `partner` to `base`, then deform it with a seeded elastic field.
/// Pass `base` as its own partner for self-pairing.
pub fn make_training_pair(
    base: &Image,
    base_seg: &SegMask,
    partner: &Image,
    partner_seg: &SegMask,
    cfg: &PairConfig,
    seed: u64,
) -> Result<TrainingPair> {
    let shape = base.shape();
    if partner.shape() != shape || base_seg.shape() != shape || partner_seg.shape() != shape {
        return Err(SarError::contract("pair images and masks must share one shape"));
    }
    let (transform, aligned, affine_fallback) = match affine_align(partner, base) {
        Ok((t, img)) => (t, img, false),
        Err(SarError::Degenerate(reason)) => {
            log::warn!("affine alignment failed ({reason}); using the partner unaligned");
            (AffineTransform::identity(), partner.clone(), true)
        }
        Err(e) => return Err(e),
    };
    let aligned_seg = transform.resample_mask(partner_seg)?;
    let def_app = random_elastic_deformation(shape, cfg.spacing, cfg.min_disp, cfg.max_disp, seed)?;
    Ok(TrainingPair {
        ref_img: base.clone(),
        ref_seg: base_seg.clone(),
        flt: warp(&aligned, &def_app, InterpMode::Bilinear)?,
        flt_seg: warp_mask(&aligned_seg, &def_app)?,
        def_inv: invert_field(&def_app, INVERSE_ITERS),
        def_app,
        affine_fallback,
    })
}

/// Synthesize `floats_per_base` pairs for every case. Each case is the
/// reference; the partner is the patient's next visit (cyclically), or the
/// case itself when `self_pairing` is set or the patient has one visit.
/// Returned with the patient id of each pair.
pub fn build_pairs(
    cases: &[Case],
    cfg: &PairConfig,
    floats_per_base: usize,
    self_pairing: bool,
    seed: u64,
) -> Result<Vec<(String, TrainingPair)>> {
    let mut visits: BTreeMap<&str, Vec<&Case>> = BTreeMap::new();
    for c in cases {
        visits.entry(c.patient_id.as_str()).or_default().push(c);
    }
    let mut pairs = Vec::with_capacity(cases.len() * floats_per_base);
    for (i, case) in cases.iter().enumerate() {
        let own = &visits[case.patient_id.as_str()];
        let partner = if self_pairing || own.len() < 2 {
            case
        } else {
            let k = own.iter().position(|c| c.visit == case.visit).unwrap_or(0);
            own[(k + 1) % own.len()]
        };
        for j in 0..floats_per_base {
            let pair_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((i * floats_per_base + j) as u64);
            let pair = make_training_pair(&case.image, &case.mask, &partner.image, &partner.mask, cfg, pair_seed)?;
            pairs.push((case.patient_id.clone(), pair));
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Patient-level 70/10/20 split. Validation and test receive the rounded
/// shares of the patient count; the remainder goes to training.
pub fn split_dataset<T>(cases: Vec<(String, T)>, seed: u64) -> Split<(String, T)> {
    let patients: BTreeSet<String> = cases.iter().map(|(p, _)| p.clone()).collect();
    let mut patients: Vec<String> = patients.into_iter().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = patients.len() as f64;
    let n_val = (0.1 * n).round() as usize;
    let n_test = (0.2 * n).round() as usize;
    let fold: BTreeMap<String, usize> = patients
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p, if i < n_val { 1 } else if i < n_val + n_test { 2 } else { 0 }))
        .collect();
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for case in cases {
        match fold[&case.0] {
            1 => split.val.push(case),
            2 => split.test.push(case),
            _ => split.train.push(case),
        }
    }
    split
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate of the supervised warm-up.
    pub lr: f64,
    /// Learning rate of the adversarial phase.
    pub adversarial_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub max_iters: usize,
    pub pretrain_iters: usize,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Share of adversarial steps in which the critics do not see the
    /// applied field, as during transfer fine-tuning.
    pub critic_field_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            adversarial_lr: 1e-4,
            beta1: 0.93,
            beta2: 0.999,
            batch: 8,
            g_steps: 1,
            d_steps: 1,
            max_iters: 2000,
            pretrain_iters: 200,
            checkpoint_every: 0,
            critic_field_dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.adversarial_lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SarError::Config("need lr > 0 and betas in [0, 1)".into()));
        }
        if self.batch == 0 || self.g_steps == 0 || self.d_steps == 0 {
            return Err(SarError::Config("batch and step counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.critic_field_dropout) {
            return Err(SarError::Config("critic_field_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Graph constants for a minibatch of pairs.
pub fn pair_batch<'g>(graph: &'g Graph<f32>, pairs: &[&TrainingPair], with_fields: bool) -> PairBatch<'g, f32> {
    let stack = |f: &dyn Fn(&TrainingPair) -> Tensor<f32>| {
        let parts: Vec<Var<'g, f32>> = pairs.iter().map(|p| graph.constant(f(p))).collect();
        graph.concat_batch(&parts)
    };
    PairBatch {
        flt: stack(&|p| p.flt.to_tensor()),
        reference: stack(&|p| p.ref_img.to_tensor()),
        flt_seg: Some(stack(&|p| p.flt_seg.to_tensor())),
        ref_seg: Some(stack(&|p| p.ref_seg.to_tensor())),
        fields: with_fields.then(|| (stack(&|p| p.def_inv.to_tensor()), stack(&|p| p.def_app.to_tensor()))),
        critic_fields: with_fields,
    }
}

fn sample_batch<'a>(pairs: &'a [TrainingPair], batch: usize, rng: &mut ChaCha8Rng) -> Vec<&'a TrainingPair> {
    (0..batch).map(|_| &pairs[rng.gen_range(0..pairs.len())]).collect()
}

type StepUpdate = (BTreeMap<String, Tensor<f32>>, Vec<(String, BnStats<f32>)>);

fn gradients_of(b: Binder<'_, '_, f32>, loss: Var<'_, f32>) -> StepUpdate {
    let grads = b.graph().backward(loss);
    (b.gradients(&grads, ""), b.take_bn_stats())
}

fn apply_step(params: &mut ModelParams, opt: &mut Optimizer, (grads, stats): StepUpdate) {
    opt.step(&mut params.store, &grads);
    for (layer, s) in stats {
        params.store.update_running_stats(&layer, &s);
    }
}

/// Supervised warm-up of both generators: image MSE after warping plus
/// field MSE (in units of the field scale) against the known fields.
/// Returns the per-step loss.
pub fn pretrain_generator(params: &mut ModelParams, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.pretrain_iters == 0 {
        return Ok(Vec::new());
    }
    if pairs.is_empty() {
        return Err(SarError::contract("no training pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut opt = Optimizer::new(cfg.adam(cfg.lr));
    let inv_scale = (1.0 / params.config.generator.field_scale) as f32;
    let mut trace = Vec::with_capacity(cfg.pretrain_iters);
    for step in 0..cfg.pretrain_iters {
        let picked = sample_batch(pairs, cfg.batch, &mut rng);
        let graph = Graph::new();
        let b = Binder::new(&params.store, &graph, Phase::Train).restricted(&["g.", "f."]);
        let batch = pair_batch(&graph, &picked, true);
        let (def_inv, def_app) = batch.fields.unwrap();
        let gcfg = params.config.generator.clone();
        let fwd = generator_graph(&b, "g", &gcfg, batch.flt, batch.reference);
        let rev = generator_graph(&b, "f", &gcfg, batch.reference, batch.flt);
        let loss = (fwd.warped - batch.reference).square().mean()
            + (fwd.field - def_inv).scale(inv_scale).square().mean()
            + (rev.warped - batch.flt).square().mean()
            + (rev.field - def_app).scale(inv_scale).square().mean();
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(SarError::NonFinite {
                component: "pretrain".into(),
                step,
            });
        }
        trace.push(value);
        let update = gradients_of(b, loss);
        apply_step(params, &mut opt, update);
    }
    Ok(trace)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub losses: LossBreakdown,
    pub critic: f64,
    pub wall_time_s: f64,
}

pub fn write_log<W: std::io::Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend(LossBreakdown::default().components().iter().map(|(n, _)| n.to_string()));
    header.extend(["total", "critic", "wall_time_s"].map(String::from));
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string()];
        rec.extend(r.losses.components().iter().map(|(_, v)| v.to_string()));
        rec.extend([r.losses.total(), r.critic, r.wall_time_s].map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Alternating adversarial training: per iteration `g_steps` generator
/// updates on the full objective, then `d_steps` critic updates. Generator
/// and critic parameters never share an optimizer step. When `out` is
/// given, checkpoints go to `out/step_<k>` and the log to `out/train_log.csv`.
pub fn train(
    params: &mut ModelParams,
    pairs: &[TrainingPair],
    extractor: &FeatureExtractor,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(SarError::contract("no training pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g_opt = Optimizer::new(cfg.adam(cfg.adversarial_lr));
    let mut d_opt = Optimizer::new(cfg.adam(cfg.adversarial_lr));
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.max_iters);
    for step in 0..cfg.max_iters {
        let picked = sample_batch(pairs, cfg.batch, &mut rng);
        let critic_fields = !rng.gen_bool(cfg.critic_field_dropout);
        let mut losses = LossBreakdown::default();
        let mut evidence = None;
        for _ in 0..cfg.g_steps {
            let graph = Graph::new();
            let b = Binder::new(&params.store, &graph, Phase::Train).restricted(&["g.", "f."]);
            let batch = PairBatch {
                critic_fields,
                ..pair_batch(&graph, &picked, true)
            };
            let obj = objective_graph(&b, params, extractor, &batch, Objective::Full)?;
            losses = obj.terms.breakdown();
            if let Some(component) = losses.non_finite() {
                return Err(SarError::NonFinite {
                    component: component.into(),
                    step,
                });
            }
            evidence = Some((obj.fake_ref.evidence(), obj.fake_flt.evidence()));
            let total = obj.terms.total();
            let update = gradients_of(b, total);
            apply_step(params, &mut g_opt, update);
        }
        let (fake_ref, fake_flt) = evidence.expect("at least one generator step");
        let mut critic = 0.0;
        for _ in 0..cfg.d_steps {
            let graph = Graph::new();
            let b = Binder::new(&params.store, &graph, Phase::Train).restricted(&["d_ref.", "d_flt."]);
            let batch = PairBatch {
                critic_fields,
                ..pair_batch(&graph, &picked, true)
            };
            let loss = critic_objective(&b, params, &batch, &fake_ref.bind(&graph), &fake_flt.bind(&graph));
            critic = loss.item() as f64;
            if !critic.is_finite() {
                return Err(SarError::NonFinite {
                    component: "critic".into(),
                    step,
                });
            }
            let update = gradients_of(b, loss);
            apply_step(params, &mut d_opt, update);
        }
        log.push(LogRow {
            step,
            losses,
            critic,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if step % 50 == 0 {
            log::info!("step {step}: total {:.4} critic {:.4}", losses.total(), critic);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                params.save(&dir.join(format!("step_{}", step + 1)))?;
            }
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_log(&log, std::fs::File::create(dir.join("train_log.csv"))?)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use crate::networks::ModelConfig;

    fn ellipse(h: usize, cr: f64, cc: f64, ar: f64, ac: f64) -> (Image, SegMask) {
        let inside = |r: usize, c: usize| ((r as f64 - cr) / ar).powi(2) + ((c as f64 - cc) / ac).powi(2) <= 1.0;
        let img = Image::from_fn(h, h, |r, c| if inside(r, c) { 0.8 } else { 0.1 }).unwrap();
        (img, SegMask::from_fn(h, h, inside))
    }

    #[test]
    fn pairs_are_seeded_and_consistent() {
        let (img, seg) = ellipse(32, 15.0, 16.0, 9.0, 6.0);
        let cfg = PairConfig {
            spacing: 8,
            min_disp: 1.0,
            max_disp: 5.0,
        };
        let a = make_training_pair(&img, &seg, &img, &seg, &cfg, 7).unwrap();
        assert_eq!(a, make_training_pair(&img, &seg, &img, &seg, &cfg, 7).unwrap());
        let (_, aligned) = affine_align(&img, &img).unwrap();
        assert_eq!(a.flt, warp(&aligned, &a.def_app, InterpMode::Bilinear).unwrap());
        assert!(!a.affine_fallback);
        let back = warp_mask(&a.flt_seg, &a.def_inv).unwrap();
        assert!(dice(&back, &seg).unwrap() >= 0.9);
    }

    #[test]
    fn degenerate_partner_falls_back() {
        let (img, seg) = ellipse(16, 8.0, 8.0, 4.0, 3.0);
        let zero = Image::constant(16, 16, 0.0).unwrap();
        let p = make_training_pair(&img, &seg, &zero, &SegMask::empty(16, 16), &PairConfig::default(), 1).unwrap();
        assert!(p.affine_fallback);
    }

    #[test]
    fn config_bounds() {
        assert!(TrainConfig::default().validate().is_ok());
        for dropout in [-0.1, 1.5, f64::NAN] {
            let cfg = TrainConfig {
                critic_field_dropout: dropout,
                ..TrainConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn split_fractions_and_disjointness() {
        let cases: Vec<(String, usize)> = (0..30).map(|i| (format!("p{}", i % 10), i)).collect();
        let s = split_dataset(cases.clone(), 3);
        let ids = |v: &[(String, usize)]| v.iter().map(|c| c.0.clone()).collect::<BTreeSet<_>>();
        assert_eq!((ids(&s.train).len(), ids(&s.val).len(), ids(&s.test).len()), (7, 1, 2));
        assert!(ids(&s.train).is_disjoint(&ids(&s.test)));
        assert!(ids(&s.val).is_disjoint(&ids(&s.test)));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 30);
        assert_eq!(s, split_dataset(cases, 3));
    }

    #[test]
    fn pretrain_noop_and_identity() {
        let (img, seg) = ellipse(16, 8.0, 8.0, 5.0, 3.0);
        let pair = TrainingPair {
            ref_img: img.clone(),
            ref_seg: seg.clone(),
            flt: img,
            flt_seg: seg,
            def_app: DisplacementField::zeros(16, 16),
            def_inv: DisplacementField::zeros(16, 16),
            affine_fallback: false,
        };
        let mut p = ModelParams::init(ModelConfig::desk(16, 16), 0).unwrap();
        let before = p.clone();
        let cfg = TrainConfig {
            pretrain_iters: 0,
            batch: 2,
            ..TrainConfig::default()
        };
        assert!(pretrain_generator(&mut p, &[pair.clone()], &cfg).unwrap().is_empty());
        assert_eq!(p, before);
        let cfg = TrainConfig {
            pretrain_iters: 20,
            ..cfg
        };
        pretrain_generator(&mut p, &[pair.clone()], &cfg).unwrap();
        let out = crate::networks::generator_forward(&p, &pair.flt, &pair.ref_img, None).unwrap();
        assert!(out.def_recv.mean_norm() < 0.5);
    }

    #[test]
    fn training_is_deterministic_and_separates_updates() {
        let (img, seg) = ellipse(16, 8.0, 8.0, 5.0, 3.0);
        let cfg = PairConfig {
            spacing: 8,
            min_disp: 1.0,
            max_disp: 3.0,
        };
        let pairs: Vec<_> = (0..3).map(|s| make_training_pair(&img, &seg, &img, &seg, &cfg, s).unwrap()).collect();
        let ex = FeatureExtractor::seeded(crate::perceptual::ExtractorConfig::desk_scale(0));
        let tcfg = TrainConfig {
            batch: 2,
            max_iters: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut p = ModelParams::init(ModelConfig::desk(16, 16), 1).unwrap();
            let log = train(&mut p, &pairs, &ex, &tcfg, None).unwrap();
            (p, log.iter().map(|r| r.losses).collect::<Vec<_>>())
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let init = ModelParams::init(ModelConfig::desk(16, 16), 1).unwrap();
        let changed = |prefix: &str| {
            a.store
                .names()
                .filter(|n| n.starts_with(prefix))
                .any(|n| a.store.get(n) != init.store.get(n))
        };
        assert!(changed("g.") && changed("f.") && changed("d_ref.") && changed("d_flt."));
    }
}
