//! Toy domains, experiment orchestration and reports.

mod domain;
mod experiment;

pub use domain::{generate_cases, load_domain, synth_domain, Case, DomainSpec, ManifestRow, ShapeFamily, TextureParams};
pub use experiment::{
    data_dir, evaluate_stage, fold_pairs, model_dir, run_experiment, synth_stage, train_stage, worker_pool, CaseRow,
    Domain, ExperimentConfig, ExperimentReport, LabelledPairs, StageStatus, BASELINE, BEF_REG, FINETUNED, FROZEN,
    IN_DOMAIN, TRANSFER,
};
