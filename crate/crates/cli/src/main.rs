use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bora_core::harness::{self, ExperimentConfig};

/// Hierarchical multi-task LoRA experiments.
#[derive(Parser)]
#[command(name = "bora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; derives every component seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides BORA_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) and split a corpus.
    Generate(Common),
    /// Pretrain and freeze a base model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus file written by `generate`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finetune all tasks at a single tau.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        steps: Option<usize>,
        /// Corpus file written by `generate`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Base model file written by `pretrain`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and evaluate every tau of the grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Corpus file written by `generate`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Re-evaluate the adapters of a `train` run on its test split.
    Eval {
        /// Directory of the `train` run.
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render figures for a finished sweep.
    Plot {
        /// Directory of the `sweep` run.
        sweep: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            if !path.exists() {
                bail!("config file not found: {}", path.display());
            }
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if common.seed.is_some() {
        config.seed = common.seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(PathBuf, bool)> {
    let ok = |p: PathBuf| Ok((p, true));
    match cli.command {
        Command::Generate(common) => {
            let config = load_config(&common)?;
            let out = config.output_dir(common.out.as_deref());
            ok(harness::run_generate(&config, &out)?)
        }
        Command::Pretrain { common, corpus } => {
            let config = load_config(&common)?;
            let out = config.output_dir(common.out.as_deref());
            ok(harness::run_pretrain(&config, &out, corpus.as_deref())?)
        }
        Command::Train {
            common,
            tau,
            steps,
            corpus,
            model,
        } => {
            let mut config = load_config(&common)?;
            if let Some(s) = steps {
                config.train.steps = s;
            }
            let out = config.output_dir(common.out.as_deref());
            let run = harness::run_train(&config, tau, &out, corpus.as_deref(), model.as_deref())?;
            println!("pooled test perplexity {}", run.pooled_perplexity);
            ok(run.manifest)
        }
        Command::Sweep { common, steps, corpus } => {
            let mut config = load_config(&common)?;
            if let Some(s) = steps {
                config.train.steps = s;
            }
            let out = config.output_dir(common.out.as_deref());
            let sweep = harness::run_sweep(&config, &out, corpus.as_deref())?;
            for f in &sweep.failures {
                eprintln!("tau={} failed: {}", f.tau, f.error);
            }
            Ok((sweep.manifest, sweep.failures.is_empty()))
        }
        Command::Eval { run, out } => {
            let out = out.unwrap_or_else(|| run.join("eval"));
            let (manifest, _, pooled) = harness::run_eval(&run, &out)?;
            println!("pooled test perplexity {pooled}");
            ok(manifest)
        }
        Command::Plot { sweep, out } => {
            let out = out.unwrap_or_else(|| sweep.join("figures"));
            ok(harness::run_plot(&sweep, &out)?)
        }
    }
}

fn print_manifest(path: &Path) {
    println!("manifest: {}", path.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok((manifest, complete)) => {
            print_manifest(&manifest);
            if complete {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
