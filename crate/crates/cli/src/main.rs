use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sst_cli::{cmd_eval, cmd_gradcheck, cmd_render, cmd_train, CliError, RunConfig};
use sst_core::gradcheck::Fault;
use sst_core::model::FusionMode;

#[derive(Parser)]
#[command(
    name = "sst",
    version,
    about = "Few-shot segmentation with self-supervised support tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to write (train) or read (eval, render).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(0..=3))]
    fold: Option<u8>,
    /// Shots per episode (1 or 5).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Fusion of five-shot relation maps: weighted, average or maximum.
    #[arg(long, global = true)]
    fusion: Option<FusionMode>,
    /// Step size of the support feature update; 0 disables its effect.
    #[arg(long, global = true)]
    eta: Option<f32>,
    /// Training seed (train, gradcheck) or evaluation stream seed (eval, render).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the fold's training classes and write a checkpoint.
    Train {
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the fold's test classes.
    Eval,
    /// Compare autodiff gradients against finite differences.
    Gradcheck {
        /// Deliberately corrupt an op's backward pass (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Write images, masks and the gradient map of one evaluation episode.
    Render {
        /// Index of the episode in the evaluation stream.
        #[arg(long, default_value_t = 0)]
        episode: u64,
    },
}

fn build_config(o: &Overrides, eval_like: bool) -> Result<RunConfig, CliError> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
        if o.checkpoint.is_none() && o.config.is_none() {
            cfg.checkpoint = out.join("model.ckpt");
        }
    }
    if let Some(p) = &o.checkpoint {
        cfg.checkpoint = p.clone();
    }
    if let Some(f) = o.fold {
        cfg.fold = f;
    }
    if let Some(k) = o.k {
        cfg.k = k;
    }
    if let Some(m) = o.fusion {
        cfg.fusion_mode = m;
    }
    if let Some(eta) = o.eta {
        cfg.eta = eta;
    }
    if let Some(seed) = o.seed {
        if eval_like {
            cfg.eval_seed = seed;
        } else {
            cfg.seed = seed;
        }
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { quiet } => {
            let cfg = build_config(&cli.overrides, false)?;
            let path = cmd_train(&cfg, quiet)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Eval => {
            let cfg = build_config(&cli.overrides, true)?;
            let (path, evals) = cmd_eval(&cfg)?;
            for e in &evals {
                println!(
                    "{}: mean-IoU {:.4}  FB-IoU {:.4}  ({} episodes)",
                    e.label, e.summary.mean_iou, e.summary.fb_iou, e.summary.episodes
                );
            }
            println!("metrics written to {}", path.display());
        }
        Command::Gradcheck { fault } => {
            let fault = match fault.as_deref() {
                None => None,
                Some("conv-backward") => Some(Fault::ConvBackward),
                Some(other) => return Err(CliError::Usage(format!("unknown fault `{other}`"))),
            };
            let seed = cli.overrides.seed.unwrap_or(0);
            match cmd_gradcheck(seed, fault) {
                Ok(report) => print!("{report}"),
                Err((report, e)) => {
                    print!("{report}");
                    return Err(e);
                }
            }
        }
        Command::Render { episode } => {
            let cfg = build_config(&cli.overrides, true)?;
            let dir = cmd_render(&cfg, episode)?;
            println!("rendered episode {episode} to {}", dir.display());
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
