use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ovit_cli::{commands, exit_code, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "ovit",
    version,
    about = "Overlapping-patch ViT matching pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Token count and pixel coverage of a W/P/S patch grid.
    GridInfo {
        image_size: usize,
        patch_size: usize,
        stride: usize,
    },
    /// Write the synthetic dataset described by the [synth] section.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Dataset root; defaults to data.root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes last.ckpt, best.ckpt and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Embed the evaluation images with a trained checkpoint.
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Checkpoint to use instead of the run directory's.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Verification AUC over repeated impostor samples; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Percentage variation of setting A over setting B.
    Pv {
        /// eval.csv of setting A.
        a: Option<PathBuf>,
        /// eval.csv of setting B.
        b: Option<PathBuf>,
        /// Table of eval rows; compares every S = P/2 row with its S = P row.
        #[arg(long, conflicts_with_all = ["a", "b"])]
        table: Option<PathBuf>,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the seed of the section this command uses.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    /// T, S, B, L or custom.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Parent directory of run directories; replaces out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn absolute(p: &Path) -> PathBuf {
    std::env::current_dir().map_or_else(|_| p.to_path_buf(), |cwd| cwd.join(p))
}

fn load(common: &Common, model: Option<&ModelArgs>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(m) = model {
        cfg.apply(&Overrides {
            variant: m.variant.clone(),
            patch: m.patch,
            stride: m.stride,
            out_dir: m.out.as_deref().map(absolute),
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GridInfo {
            image_size,
            patch_size,
            stride,
        } => commands::grid_info(image_size, patch_size, stride),
        Command::Synth { common, out } => {
            let mut cfg = load(&common, None)?;
            if let (Some(seed), Some(s)) = (common.seed, cfg.synth.as_mut()) {
                s.seed = seed;
            }
            commands::synth(&cfg, out.as_deref().map(absolute).as_deref())
        }
        Command::Train { common, model } => {
            let mut cfg = load(&common, Some(&model))?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            commands::train(&cfg)
        }
        Command::Embed {
            common,
            model,
            checkpoint,
        } => {
            let cfg = load(&common, Some(&model))?;
            commands::embed(&cfg, checkpoint.as_deref().map(absolute).as_deref())
        }
        Command::Eval { common, model } => {
            let mut cfg = load(&common, Some(&model))?;
            if let Some(seed) = common.seed {
                cfg.eval.seed = seed;
            }
            commands::eval(&cfg).map(drop)
        }
        Command::Pv { a, b, table, out } => {
            let reports = commands::pv(a.as_deref(), b.as_deref(), table.as_deref())?;
            commands::write_pv(&reports, out.as_ref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
