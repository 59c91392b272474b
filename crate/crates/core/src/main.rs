use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sarreg::harness::{evaluate_stage, run_experiment, synth_stage, train_stage, Domain, ExperimentConfig, ExperimentReport};
use sarreg::imagecore::io::{load_image, load_mask};
use sarreg::networks::ModelParams;
use sarreg::transfer::{finetune_register, register_frozen, write_result, PairMasks, RegistrationResult};
use sarreg::SarError;

#[derive(Parser)]
#[command(name = "sarreg", version, about = "Adversarial deformable registration with last-layer transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairArgs {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    flt: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, requires = "ref_mask")]
    flt_mask: Option<PathBuf>,
    #[arg(long, requires = "flt_mask")]
    ref_mask: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and target toy domains.
    SynthData(Common),
    /// Train on one domain of a synthesized experiment directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "source")]
        domain: DomainArg,
    },
    /// Register one pair with a trained model, without adaptation.
    Register {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Register one pair, fine-tuning the field head first.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Score trained models on the test folds and write the report.
    Evaluate(Common),
    /// Print the table of an existing report.
    Report(Common),
    /// Run every stage end to end.
    Run(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn register_pair(common: &Common, pair: &PairArgs, finetune: bool) -> Result<RegistrationResult> {
    let cfg = load_config(common)?;
    let model = ModelParams::load(&pair.model)?;
    let flt = load_image(&pair.flt)?;
    let reference = load_image(&pair.reference)?;
    let masks = match (&pair.flt_mask, &pair.ref_mask) {
        (Some(f), Some(r)) => Some((load_mask(f)?, load_mask(r)?)),
        _ => None,
    };
    let masks_ref = masks.as_ref().map(|(f, r)| PairMasks { flt: f, reference: r });
    let result = if finetune {
        let extractor = cfg.feature_extractor()?;
        finetune_register(&model, &extractor, &flt, &reference, &cfg.finetune, masks_ref)?
    } else {
        register_frozen(&model, &flt, &reference, masks_ref)?
    };
    write_result(&result, &reference, &common.out)?;
    Ok(result)
}

fn print_report(dir: &Path) -> Result<()> {
    let report = ExperimentReport::read(dir)?;
    print!("{}", report.table()?);
    for s in report.stages.iter().filter(|s| !s.ok) {
        println!("stage {} failed: {}", s.stage, s.message);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SynthData(c) => synth_stage(&load_config(&c)?, &c.out)?,
        Command::Train { common, domain } => {
            let d = match domain {
                DomainArg::Source => Domain::Source,
                DomainArg::Target => Domain::Target,
            };
            train_stage(&load_config(&common)?, &common.out, d)?;
        }
        Command::Register { common, pair } => {
            register_pair(&common, &pair, false)?;
        }
        Command::Finetune { common, pair } => {
            let r = register_pair(&common, &pair, true)?;
            println!("iterations: {}  runtime: {:.3}s", r.iters_used, r.runtime_s);
            if r.degraded {
                eprintln!("fine-tuning stopped on a non-finite loss; best earlier iterate returned");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Evaluate(c) => {
            let report = evaluate_stage(&load_config(&c)?, &c.out)?;
            report.write(&c.out.join("report"))?;
            print_report(&c.out.join("report"))?;
        }
        Command::Report(c) => print_report(&c.out.join("report"))?,
        Command::Run(c) => {
            let report = run_experiment(&load_config(&c)?, &c.out)?;
            print_report(&c.out.join("report"))?;
            if report.stages.iter().any(|s| !s.ok) {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<SarError>().map_or(1, SarError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
