//! The transfer-gap experiment: train on a source domain, register target
//! pairs frozen and fine-tuned, and compare with a model trained on the
//! target domain itself.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::domain::{load_domain, synth_domain, DomainSpec, ShapeFamily, TextureParams};
use crate::error::{Result, SarError};
use crate::imagecore::io::save_overlay;
use crate::imagecore::{warp_mask, SegMask};
use crate::metrics::{dice, hausdorff95, mad};
use crate::networks::{DiscriminatorConfig, GeneratorConfig, ModelConfig, ModelParams};
use crate::perceptual::{ExtractorConfig, FeatureExtractor};
use crate::training::{build_pairs, pretrain_generator, split_dataset, train, PairConfig, TrainConfig, TrainingPair};
use crate::transfer::{finetune_register, register_frozen, FinetuneConfig, PairMasks, RegistrationResult};

pub const IN_DOMAIN: &str = "in_domain";
pub const TRANSFER: &str = "transfer";
pub const BEF_REG: &str = "Bef. Reg";
pub const FROZEN: &str = "frozen";
pub const FINETUNED: &str = "finetuned";
pub const BASELINE: &str = "baseline";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed for pair synthesis, splitting and training.
    pub seed: u64,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub pairs: PairConfig,
    /// Synthetic floating images per reference image.
    pub floats_per_base: usize,
    /// Deform each image against itself instead of another visit.
    pub self_pairing: bool,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    /// Pass ground-truth masks to fine-tuning instead of fused-map masks.
    pub finetune_with_masks: bool,
    /// Also train on the target domain for the in-domain comparison.
    pub baseline: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub extractor: ExtractorConfig,
    /// Optional pretrained extractor weights; random otherwise.
    pub extractor_weights: Option<PathBuf>,
    pub pixel_spacing_mm: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let domain = |name: &str, family, seed| DomainSpec {
            name: name.into(),
            family,
            size: 64,
            patients: 50,
            images_per_patient: 2,
            texture: TextureParams::default(),
            seed,
        };
        Self {
            seed: 0,
            source: domain("lung", ShapeFamily::Lung, 1),
            target: domain("brain", ShapeFamily::Brain, 2),
            pairs: PairConfig {
                spacing: 16,
                min_disp: 1.0,
                max_disp: 8.0,
            },
            floats_per_base: 2,
            self_pairing: false,
            train: TrainConfig {
                batch: 4,
                pretrain_iters: 300,
                max_iters: 150,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
            finetune_with_masks: false,
            baseline: true,
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            extractor: ExtractorConfig::desk_scale(0),
            extractor_weights: None,
            pixel_spacing_mm: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SarError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SarError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if self.source.size != self.target.size {
            return Err(SarError::Config("source and target domains must share one image size".into()));
        }
        if self.floats_per_base == 0 {
            return Err(SarError::Config("floats_per_base must be positive".into()));
        }
        self.train.validate()?;
        self.finetune.validate()?;
        self.model().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            height: self.source.size,
            width: self.source.size,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
        }
    }

    fn spec(&self, domain: Domain) -> &DomainSpec {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn feature_extractor(&self) -> Result<FeatureExtractor> {
        match &self.extractor_weights {
            Some(p) => FeatureExtractor::from_weight_file(self.extractor, p),
            None => Ok(FeatureExtractor::seeded(self.extractor)),
        }
    }
}

/// Output layout of an experiment directory.
pub fn data_dir(out: &Path, domain: Domain) -> PathBuf {
    out.join("data").join(domain.dir_name())
}

pub fn model_dir(out: &Path, domain: Domain) -> PathBuf {
    out.join("models").join(domain.dir_name())
}

/// Write both domains to disk.
pub fn synth_stage(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    for d in [Domain::Source, Domain::Target] {
        synth_domain(cfg.spec(d), &data_dir(out, d))?;
    }
    Ok(())
}

/// Labelled pairs of one fold: `(case id, pair)`.
pub type LabelledPairs = Vec<(String, TrainingPair)>;

/// Read a domain from disk, split it by patient and synthesize pairs for
/// the training and test folds.
pub fn fold_pairs(cfg: &ExperimentConfig, out: &Path, domain: Domain) -> Result<(LabelledPairs, LabelledPairs)> {
    let cases = load_domain(&data_dir(out, domain))?;
    let labelled = cases.into_iter().map(|c| (c.patient_id.clone(), c)).collect();
    let split = split_dataset(labelled, cfg.seed);
    let make = |fold: Vec<(String, super::Case)>, offset: u64| -> Result<LabelledPairs> {
        let cases: Vec<_> = fold.into_iter().map(|c| c.1).collect();
        let pairs = build_pairs(&cases, &cfg.pairs, cfg.floats_per_base, cfg.self_pairing, cfg.seed.wrapping_add(offset))?;
        Ok(pairs
            .into_iter()
            .enumerate()
            .map(|(i, (patient, p))| (format!("{patient}_{i:03}"), p))
            .collect())
    };
    Ok((make(split.train, 1)?, make(split.test, 2)?))
}

/// Pretrain and adversarially train on one domain; writes the checkpoint
/// and the training log.
pub fn train_stage(cfg: &ExperimentConfig, out: &Path, domain: Domain) -> Result<ModelParams> {
    let (train_pairs, _) = fold_pairs(cfg, out, domain)?;
    let pairs: Vec<TrainingPair> = train_pairs.into_iter().map(|p| p.1).collect();
    let extractor = cfg.feature_extractor()?;
    let mut params = ModelParams::init(cfg.model(), cfg.seed)?;
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let run_dir = out.join("runs").join(domain.dir_name());
    log::info!("training on {} ({} pairs)", domain.dir_name(), pairs.len());
    let warmup = pretrain_generator(&mut params, &pairs, &tcfg)?;
    fs::create_dir_all(&run_dir)?;
    let mut wtr = csv::Writer::from_path(run_dir.join("pretrain_log.csv"))?;
    wtr.write_record(["step", "loss"])?;
    for (i, l) in warmup.iter().enumerate() {
        wtr.write_record([i.to_string(), l.to_string()])?;
    }
    wtr.flush()?;
    train(&mut params, &pairs, &extractor, &tcfg, Some(&run_dir))?;
    params.save(&model_dir(out, domain))?;
    Ok(params)
}

/// One evaluated case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    /// `case`, `mean` or `std`.
    pub section: String,
    pub setting: String,
    pub method: String,
    pub case_id: String,
    pub dice: f64,
    pub hd95: f64,
    pub mad: f64,
    pub runtime_s: f64,
    pub iters: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub ok: bool,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExperimentReport {
    /// Per-case rows only; summaries are derived.
    pub rows: Vec<CaseRow>,
    pub stages: Vec<StageStatus>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl ExperimentReport {
    fn select(&self, setting: &str, method: &str) -> Vec<&CaseRow> {
        self.rows
            .iter()
            .filter(|r| r.section == "case" && r.setting == setting && r.method == method)
            .collect()
    }

    /// Mean and standard deviation rows of one setting and method.
    pub fn summary(&self, setting: &str, method: &str) -> Option<(CaseRow, CaseRow)> {
        let rows = self.select(setting, method);
        if rows.is_empty() {
            return None;
        }
        let stats = |f: fn(&CaseRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        let cols = [
            stats(|r| r.dice),
            stats(|r| r.hd95),
            stats(|r| r.mad),
            stats(|r| r.runtime_s),
            stats(|r| r.iters),
        ];
        let row = |section: &str, pick: fn((f64, f64)) -> f64| CaseRow {
            section: section.into(),
            setting: setting.into(),
            method: method.into(),
            case_id: String::new(),
            dice: pick(cols[0]),
            hd95: pick(cols[1]),
            mad: pick(cols[2]),
            runtime_s: pick(cols[3]),
            iters: pick(cols[4]),
        };
        Some((row("mean", |s| s.0), row("std", |s| s.1)))
    }

    pub fn mean_dice(&self, setting: &str, method: &str) -> Option<f64> {
        self.summary(setting, method).map(|s| s.0.dice)
    }

    /// Baseline dice minus fine-tuned transfer dice on the target domain.
    pub fn gap(&self) -> Option<f64> {
        Some(self.mean_dice(TRANSFER, BASELINE)? - self.mean_dice(TRANSFER, FINETUNED)?)
    }

    fn methods(&self, setting: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in self.rows.iter().filter(|r| r.setting == setting) {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    /// Case rows followed by mean and std rows of every setting and method.
    pub fn all_rows(&self) -> Vec<CaseRow> {
        let mut rows = self.rows.clone();
        for setting in [IN_DOMAIN, TRANSFER] {
            for m in self.methods(setting) {
                if let Some((mean, std)) = self.summary(setting, &m) {
                    rows.push(mean);
                    rows.push(std);
                }
            }
        }
        rows
    }

    /// `cases.csv`, `table.csv` and `stages.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut wtr = csv::Writer::from_path(dir.join("cases.csv"))?;
        for r in self.all_rows() {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        fs::write(dir.join("table.csv"), self.table()?)?;
        let mut wtr = csv::Writer::from_path(dir.join("stages.csv"))?;
        for s in &self.stages {
            wtr.serialize(s)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parse `cases.csv` (and `stages.csv` when present) back.
    pub fn read(dir: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(dir.join("cases.csv"))?;
        let rows: Vec<CaseRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let stages = match csv::Reader::from_path(dir.join("stages.csv")) {
            Ok(mut r) => r.deserialize().collect::<std::result::Result<_, _>>()?,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            rows: rows.into_iter().filter(|r| r.section == "case").collect(),
            stages,
        })
    }

    /// Table with one row per setting and metric, a before-registration
    /// column, one column per method and the transfer gap.
    pub fn table(&self) -> Result<String> {
        let methods = [FROZEN, FINETUNED, BASELINE];
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["setting", "metric", BEF_REG];
        header.extend(methods);
        header.push("gap");
        wtr.write_record(&header)?;
        for setting in [IN_DOMAIN, TRANSFER] {
            if self.methods(setting).is_empty() {
                continue;
            }
            for (metric, pick) in [
                ("DM", (|r: &CaseRow| r.dice) as fn(&CaseRow) -> f64),
                ("HD95_mm", |r| r.hd95),
                ("MAD_mm", |r| r.mad),
                ("runtime_s", |r| r.runtime_s),
            ] {
                let mut rec = vec![setting.to_string(), metric.to_string()];
                for m in std::iter::once(BEF_REG).chain(methods) {
                    rec.push(match self.summary(setting, m) {
                        Some((mean, std)) => format!("{:.4} ± {:.4}", pick(&mean), pick(&std)),
                        None => "-".into(),
                    });
                }
                rec.push(match (setting, metric, self.gap()) {
                    (TRANSFER, "DM", Some(g)) => format!("{g:.4}"),
                    _ => "-".into(),
                });
                wtr.write_record(&rec)?;
            }
        }
        let bytes = wtr.into_inner().map_err(|e| SarError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn case_row(setting: &str, method: &str, id: &str, seg: &SegMask, reference: &SegMask, spacing: f64, runtime_s: f64, iters: usize) -> Result<CaseRow> {
    Ok(CaseRow {
        section: "case".into(),
        setting: setting.into(),
        method: method.into(),
        case_id: id.into(),
        dice: dice(seg, reference)?,
        hd95: hausdorff95(seg, reference)? * spacing,
        mad: mad(seg, reference)? * spacing,
        runtime_s,
        iters: iters as f64,
    })
}

/// Thread pool capped by `SARREG_THREADS` when set.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SARREG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| SarError::Config(format!("SARREG_THREADS={v} is not a positive integer")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| SarError::Config(e.to_string()))
}

/// How a test pair is registered.
#[derive(Clone, Copy)]
enum Method<'a> {
    Frozen(&'a ModelParams),
    Finetuned(&'a ModelParams, &'a FeatureExtractor),
}

fn register_all(cfg: &ExperimentConfig, pairs: &LabelledPairs, method: Method) -> Result<Vec<RegistrationResult>> {
    worker_pool()?.install(|| {
        pairs
            .par_iter()
            .map(|(_, p)| {
                let masks = PairMasks {
                    flt: &p.flt_seg,
                    reference: &p.ref_seg,
                };
                match method {
                    Method::Frozen(m) => register_frozen(m, &p.flt, &p.ref_img, Some(masks)),
                    Method::Finetuned(m, ex) => {
                        let masks = cfg.finetune_with_masks.then_some(masks);
                        finetune_register(m, ex, &p.flt, &p.ref_img, &cfg.finetune, masks)
                    }
                }
            })
            .collect()
    })
}

fn score(
    cfg: &ExperimentConfig,
    out: &Path,
    setting: &str,
    method: &str,
    pairs: &LabelledPairs,
    results: &[RegistrationResult],
) -> Result<Vec<CaseRow>> {
    let fig_dir = out.join("figures").join(setting).join(method);
    fs::create_dir_all(&fig_dir)?;
    pairs
        .iter()
        .zip(results)
        .map(|((id, p), r)| {
            // Always score the ground-truth floating mask carried by the field.
            let seg = warp_mask(&p.flt_seg, &r.def_recv)?;
            save_overlay(&p.ref_img, &p.ref_seg, &seg, &fig_dir.join(format!("{id}.png")))?;
            case_row(setting, method, id, &seg, &p.ref_seg, cfg.pixel_spacing_mm, r.runtime_s, r.iters_used)
        })
        .collect()
}

fn before_rows(cfg: &ExperimentConfig, setting: &str, pairs: &LabelledPairs) -> Result<Vec<CaseRow>> {
    pairs
        .iter()
        .map(|(id, p)| case_row(setting, BEF_REG, id, &p.flt_seg, &p.ref_seg, cfg.pixel_spacing_mm, 0.0, 0))
        .collect()
}

/// Score stored models on the test folds: the source model frozen on the
/// source domain, the source model frozen and fine-tuned on the target
/// domain, and the target model (when trained) on the target domain.
pub fn evaluate_stage(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    let source = ModelParams::load(&model_dir(out, Domain::Source))?;
    let extractor = cfg.feature_extractor()?;

    let (_, src_test) = fold_pairs(cfg, out, Domain::Source)?;
    report.rows.extend(before_rows(cfg, IN_DOMAIN, &src_test)?);
    let frozen = register_all(cfg, &src_test, Method::Frozen(&source))?;
    report.rows.extend(score(cfg, out, IN_DOMAIN, FROZEN, &src_test, &frozen)?);

    let (_, tgt_test) = fold_pairs(cfg, out, Domain::Target)?;
    report.rows.extend(before_rows(cfg, TRANSFER, &tgt_test)?);
    let frozen = register_all(cfg, &tgt_test, Method::Frozen(&source))?;
    report.rows.extend(score(cfg, out, TRANSFER, FROZEN, &tgt_test, &frozen)?);
    let tuned = register_all(cfg, &tgt_test, Method::Finetuned(&source, &extractor))?;
    report.rows.extend(score(cfg, out, TRANSFER, FINETUNED, &tgt_test, &tuned)?);

    let target_dir = model_dir(out, Domain::Target);
    if target_dir.join("manifest.json").exists() {
        let target = ModelParams::load(&target_dir)?;
        let base = register_all(cfg, &tgt_test, Method::Frozen(&target))?;
        report.rows.extend(score(cfg, out, TRANSFER, BASELINE, &tgt_test, &base)?);
    }
    Ok(report)
}

/// Run every stage in order. A failing stage stops the pipeline; the
/// report then holds whatever was computed and names the failed stage.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut stages = Vec::new();
    let mut record = |name: &str, r: Result<()>| {
        let ok = r.is_ok();
        let message = r.err().map(|e| e.to_string()).unwrap_or_default();
        if !ok {
            log::error!("stage {name} failed: {message}");
        }
        stages.push(StageStatus {
            stage: name.into(),
            ok,
            message,
        });
        ok
    };
    let mut report = ExperimentReport::default();
    let ok = record("synth", synth_stage(cfg, out))
        && record("train_source", train_stage(cfg, out, Domain::Source).map(drop))
        && (!cfg.baseline || record("train_target", train_stage(cfg, out, Domain::Target).map(drop)));
    if ok {
        match evaluate_stage(cfg, out) {
            Ok(r) => {
                report = r;
                record("evaluate", Ok(()));
            }
            Err(e) => {
                record("evaluate", Err(e));
            }
        }
    }
    report.stages = stages;
    report.write(&out.join("report"))?;
    Ok(report)
}
