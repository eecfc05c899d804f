use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use unroll_cli::commands;
use unroll_cli::config::{self, ExperimentConfig};
use unroll_cli::presets;

#[derive(Parser)]
#[command(
    name = "unroll",
    version,
    about = "Learn solver hyperparameters for sparse image reconstruction and apply them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/test datasets onto disk.
    Simulate(RunArgs),
    /// Fit hyperparameters on a dataset; writes checkpoint.txt and history.csv.
    Train(RunArgs),
    /// Apply a checkpoint to a dataset; writes per-frame reconstructions.
    Reconstruct(RunArgs),
    /// Score reconstructions against ground truth; writes metrics.csv.
    Evaluate(RunArgs),
    /// Compare analytic hyperparameter gradients with finite differences.
    Checkgrad(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Built-in recipe; see the project README for the list.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; receives artifacts plus the resolved config echo.
    #[arg(long)]
    out: PathBuf,
    /// Write into an existing nonempty output directory.
    #[arg(long)]
    force: bool,
    /// Override the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the task loss (l1 or l2).
    #[arg(long)]
    loss: Option<String>,
    /// Override the data fidelity (l2 or kl).
    #[arg(long)]
    fidelity: Option<String>,
    /// Override the dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the checkpoint consumed by reconstruct.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override the reconstruction directory consumed by evaluate.
    #[arg(long)]
    recon: Option<PathBuf>,
    /// Continue training from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Restrict checkgrad to one parameter (rho, alpha, delta, width).
    #[arg(long)]
    param: Option<String>,
    /// Worker threads for the sample-parallel passes (0 = all cores).
    /// Results never depend on this; batch reductions run in fixed order.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => presets::preset(name).ok_or_else(|| {
            anyhow!(
                "unknown preset `{name}`; available: {}",
                presets::PRESET_NAMES.join(", ")
            )
        })?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            config::from_text(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?
        }
        (None, None) => bail!("pass --preset <name> or --config <path>"),
        (Some(_), Some(_)) => unreachable!("clap rejects --preset together with --config"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(loss) = &args.loss {
        cfg.loss = loss.clone();
    }
    if let Some(fidelity) = &args.fidelity {
        cfg.fidelity = fidelity.clone();
    }
    if let Some(data) = &args.data {
        cfg.data = data.display().to_string();
    }
    if let Some(checkpoint) = &args.checkpoint {
        cfg.checkpoint = checkpoint.display().to_string();
    }
    if let Some(recon) = &args.recon {
        cfg.recon = recon.display().to_string();
    }
    if let Some(resume) = &args.resume {
        cfg.resume = resume.display().to_string();
    }
    if let Some(param) = &args.param {
        cfg.check_param = param.clone();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (args, run): (&RunArgs, fn(&ExperimentConfig, &Path) -> Result<()>) = match &cli.command {
        Command::Simulate(a) => (a, commands::cmd_simulate),
        Command::Train(a) => (a, commands::cmd_train),
        Command::Reconstruct(a) => (a, commands::cmd_reconstruct),
        Command::Evaluate(a) => (a, commands::cmd_evaluate),
        Command::Checkgrad(a) => (a, commands::cmd_checkgrad),
    };
    if args.threads > 0 {
        // One-shot process: a second build_global is impossible, so the
        // Result only guards against a hook having installed a pool first.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build_global();
    }
    let cfg = resolve_config(args)?;
    commands::prepare_out(&args.out, args.force)?;
    run(&cfg, &args.out)
}
