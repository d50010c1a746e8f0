//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slimvit::io::commands::{
    export_cmd, flops_cmd, load_model_config, pretrain_teacher_cmd, probe_cmd, regranularize_cmd, sweep_cmd,
    train_cmd,
};
use slimvit::io::config::RunConfig;
use slimvit::slicing::{parse_rational, Rational, SliceMode, WidthRatio};
use slimvit::Result;

#[derive(Parser)]
#[command(name = "slimvit", version, about = "Train and evaluate slimmable vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-width network with cross-entropy only (the external
    /// teacher).
    PretrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Jointly train all sub-networks on the configured grid.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this epoch instead of `train.epochs`.
        #[arg(long)]
        until_epoch: Option<u32>,
    },
    /// Held-out accuracy and costs at each ratio of a checkpoint.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ratios; defaults to the checkpoint's grid.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<WidthRatio>>,
    },
    /// Accuracy at untrained ratios and the gap to the nearest trained one.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<WidthRatio>,
    },
    /// Multiply-accumulates and parameters per ratio.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<WidthRatio>>,
    },
    /// Copy one sub-network into a standalone checkpoint.
    ExportSubnet {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ratio: WidthRatio,
        /// `leading` or `trailing`; defaults to the trained slicing.
        #[arg(long)]
        mode: Option<SliceMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Change the slicing granularity of a training checkpoint and keep
    /// training.
    Regranularize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_rational)]
        eps: Rational,
        #[arg(long)]
        epochs: u32,
        /// Where to write the continued checkpoint; defaults to overwriting
        /// `--checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> Result<()> {
    let stdout = std::io::stdout();
    let out = &mut stdout.lock();
    match cmd {
        Command::PretrainTeacher { config } => {
            pretrain_teacher_cmd(&RunConfig::load(&config)?, out)?;
        }
        Command::Train {
            config,
            resume,
            until_epoch,
        } => {
            train_cmd(&RunConfig::load(&config)?, resume.as_deref(), until_epoch, out)?;
        }
        Command::Sweep {
            config,
            checkpoint,
            ratios,
        } => {
            sweep_cmd(&RunConfig::load(&config)?, &checkpoint, ratios.as_deref(), out)?;
        }
        Command::Probe {
            config,
            checkpoint,
            ratios,
        } => probe_cmd(&RunConfig::load(&config)?, &checkpoint, &ratios, out)?,
        Command::Flops { config, ratios } => flops_cmd(&load_model_config(&config)?, ratios.as_deref(), out)?,
        Command::ExportSubnet {
            checkpoint,
            ratio,
            mode,
            out: dest,
        } => export_cmd(&checkpoint, ratio, mode, &dest, out)?,
        Command::Regranularize {
            config,
            checkpoint,
            eps,
            epochs,
            out: dest,
        } => {
            regranularize_cmd(&RunConfig::load(&config)?, &checkpoint, eps, epochs, dest.as_deref(), out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
