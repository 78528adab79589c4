use centerline::cli;
use centerline::config::RunConfig;
use centerline::error::Result;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "centerline",
    about = "Diffusion-based 3D vessel centerline extraction pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key=value config file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the command's primary seed (synth: synth_seed,
    /// train: train_seed, extract/sweep: seed_base).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the denoiser; writes checkpoint and loss history.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model.ckpt and loss_history.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a centerline from one volume via sampling plus voting.
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input volume file.
        #[arg(long)]
        volume: PathBuf,
        /// Output centerline file; a `.report.txt` sidecar is written too.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted centerlines against ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of predicted `<id>.cl` files.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth `<id>.cl` files.
        #[arg(long)]
        gt: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the vote count K on the test split; writes CSV and SVG.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated K values, e.g. 1,5,10.
        #[arg(long, value_delimiter = ',')]
        k_values: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn effective_config(args: &ConfigArgs, command: &str) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        match command {
            "synth" => cfg.synth_seed = seed,
            "train" => cfg.train_seed = seed,
            "extract" | "sweep" => cfg.seed_base = seed,
            _ => {}
        }
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { cfg, out, force } => {
            let cfg = effective_config(cfg, "synth")?;
            cli::cmd_synth(&cfg, out, *force)
        }
        Command::Train { cfg, data, out } => {
            let cfg = effective_config(cfg, "train")?;
            cli::cmd_train(&cfg, data, out)
        }
        Command::Extract {
            cfg,
            ckpt,
            volume,
            out,
        } => {
            let cfg = effective_config(cfg, "extract")?;
            cli::cmd_extract(&cfg, ckpt, volume, out)
        }
        Command::Eval {
            cfg,
            pred,
            gt,
            out,
        } => {
            let cfg = effective_config(cfg, "eval")?;
            cli::cmd_eval(&cfg, pred, gt, out)
        }
        Command::Sweep {
            cfg,
            ckpt,
            data,
            k_values,
            out,
        } => {
            let cfg = effective_config(cfg, "sweep")?;
            cli::cmd_sweep(&cfg, ckpt, data, k_values, out).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
