use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prnn_core::harness::{self, AblationVariant, ExperimentConfig};
use prnn_core::synth::SplitName;
use prnn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "prnn", version, about = "Depth-sequence action recognition with privileged skeleton information")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one variant, checkpoint each stage and report test metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        /// Dataset manifest (overrides the config).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a stage checkpoint on depth frames only.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all variants over several seeds and summarize.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds (overrides the config).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn resolve(cfg: &mut ExperimentConfig, manifest: Option<PathBuf>, config_path: Option<&Path>) {
    if let Some(m) = manifest {
        cfg.manifest = Some(m);
    } else if let (Some(m), Some(base)) = (&cfg.manifest, config_path.and_then(Path::parent)) {
        if m.is_relative() {
            cfg.manifest = Some(base.join(m));
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.dataset.base_seed = seed;
            }
            let path = harness::cmd_gen_data(&cfg.dataset, &common.out)?;
            println!("{}", path.display());
        }
        Command::Train {
            common,
            variant,
            manifest,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.variant = v.parse::<AblationVariant>()?;
            }
            resolve(&mut cfg, manifest, common.config.as_deref());
            let report = harness::cmd_train(&cfg, &common.out)?;
            println!(
                "{} seed {}: mean accuracy {:.4} (stages: {})",
                report.metrics.variant,
                report.metrics.seed,
                report.metrics.mean_accuracy,
                report.stages.join(", ")
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let report = harness::cmd_eval(&checkpoint, &manifest, SplitName::parse(&split)?, &out)?;
            println!(
                "{} ({} sequences): mean accuracy {:.4}",
                report.split, report.sequences, report.mean_accuracy
            );
        }
        Command::Ablate {
            common,
            seeds,
            manifest,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            resolve(&mut cfg, manifest, common.config.as_deref());
            let report = harness::cmd_ablate(&cfg, &common.out)?;
            for row in &report.summary {
                println!("{:<18} {:.4} ± {:.4} ({} runs)", row.variant.as_str(), row.mean, row.std, row.runs);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &Error) -> u8 {
    e.exit_code() as u8
}
