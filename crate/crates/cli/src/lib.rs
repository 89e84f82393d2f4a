//! Commands behind the `sst` binary.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sst_core::episodes::{write_gray_pgm, write_image_ppm, write_mask_pgm, Mode};
use sst_core::gradcheck::{run_gradcheck, Fault, GradcheckConfig, GradcheckReport};
use sst_core::model::{forward_one_shot, gradient_image, FusionMode, ModelSpec, FEATURE_STRIDE};
use sst_core::nn::{init_parameters, load_checkpoint_for, save_checkpoint, ParameterStore};
use sst_core::train_eval::{eval_episode_seed, evaluate, train, write_metrics, Evaluation};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// A check did not pass or a step failed at run time; exit status 1.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| fail(format!("cannot create {}: {e}", dir.display())))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| fail(format!("cannot create {}: {e}", path.display())))
}

fn load_params(path: &Path) -> Result<ParameterStore, CliError> {
    load_checkpoint_for(path, &ModelSpec::arch()).map_err(fail)
}

#[derive(Serialize)]
struct StepLine {
    step: usize,
    main_loss: f32,
    aux_loss: f32,
    total: f32,
}

/// Trains on the fold's training classes and writes the checkpoint, a
/// per-step loss log and the effective configuration.
pub fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<PathBuf, CliError> {
    let split = cfg.split()?;
    let source = cfg.source()?;
    create_dir(&cfg.out_dir)?;
    let mut params = match &cfg.init_checkpoint {
        Some(path) => load_params(path)?,
        None => init_parameters(&ModelSpec::arch(), cfg.seed).map_err(fail)?,
    };
    let mut log = create_file(&cfg.out_dir.join("train_log.jsonl"))?;
    let steps = cfg.train_config().steps();
    let mut io_error = None;
    train(
        &split,
        &source,
        &mut params,
        &cfg.model(),
        &cfg.optimizer,
        &cfg.train_config(),
        |step, r| {
            let line = StepLine {
                step,
                main_loss: r.main_loss,
                aux_loss: r.aux_loss,
                total: r.total,
            };
            let written = serde_json::to_writer(&mut log, &line)
                .map_err(std::io::Error::from)
                .and_then(|_| log.write_all(b"\n"));
            if let Err(e) = written {
                io_error.get_or_insert(e);
            }
            if !quiet && (step + 1) % 50 == 0 {
                eprintln!(
                    "step {}/{steps}: main {:.4} aux {:.4} total {:.4}",
                    step + 1,
                    r.main_loss,
                    r.aux_loss,
                    r.total
                );
            }
        },
    )
    .map_err(fail)?;
    if let Some(e) = io_error {
        return Err(fail(format!("writing train log: {e}")));
    }
    log.flush().map_err(fail)?;
    if let Some(parent) = cfg.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(&params, &cfg.checkpoint).map_err(fail)?;
    let echo = serde_json::to_string_pretty(cfg).map_err(fail)?;
    fs::write(cfg.out_dir.join("config.json"), echo).map_err(fail)?;
    Ok(cfg.checkpoint.clone())
}

fn eta_tag(eta: f32) -> String {
    format!("{eta}").replace('.', "p")
}

/// Evaluates the checkpoint on test episodes. Five-shot runs produce one
/// summary per fusion mode. Returns the metrics path and the evaluations.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(PathBuf, Vec<Evaluation>), CliError> {
    let split = cfg.split()?;
    let source = cfg.source()?;
    let params = load_params(&cfg.checkpoint)?;
    let modes = if cfg.k == 5 { FusionMode::ALL.to_vec() } else { vec![] };
    let evals = evaluate(&split, &source, &params, &cfg.model(), &cfg.eval_config(), &modes).map_err(fail)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!(
        "eval_fold{}_k{}_eta{}.jsonl",
        cfg.fold,
        cfg.k,
        eta_tag(if cfg.tuning { cfg.eta } else { 0.0 })
    ));
    let mut out = create_file(&path)?;
    write_metrics(&mut out, &evals, cfg).map_err(fail)?;
    out.flush().map_err(fail)?;
    Ok((path, evals))
}

/// Runs the finite-difference suite. Fails when any op exceeds tolerance.
pub fn cmd_gradcheck(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport, (GradcheckReport, CliError)> {
    let report = match run_gradcheck(seed, &GradcheckConfig::default(), fault) {
        Ok(r) => r,
        Err(e) => {
            let empty = GradcheckReport {
                seed,
                tolerance: GradcheckConfig::default().tolerance,
                ops: vec![],
            };
            return Err((empty, fail(e)));
        }
    };
    if report.all_passed() {
        Ok(report)
    } else {
        let failing: Vec<&str> = report.ops.iter().filter(|o| !o.passed).map(|o| o.op).collect();
        let msg = format!("gradient check failed for: {}", failing.join(", "));
        Err((report, CliError::Failure(msg)))
    }
}

pub const RENDER_FILES: [&str; 6] = [
    "query.ppm",
    "support.ppm",
    "gt.pgm",
    "pred_pre.pgm",
    "pred_post.pgm",
    "gradmap.pgm",
];

/// Renders evaluation episode `episode` of the configured fold: the query
/// and support images, the query ground truth, the query prediction
/// without and with support feature tuning, and the support gradient map.
pub fn cmd_render(cfg: &RunConfig, episode: u64) -> Result<PathBuf, CliError> {
    let split = cfg.split()?;
    let source = cfg.source()?;
    let params = load_params(&cfg.checkpoint)?;
    let ep = source
        .sample(&split, Mode::Test, 1, eval_episode_seed(cfg.eval_seed, episode))
        .map_err(fail)?;
    let spec = ModelSpec {
        tuning: true,
        ..cfg.model()
    };
    let pre = forward_one_shot(&ep, &params, &ModelSpec { eta: 0.0, ..spec }).map_err(fail)?;
    let post = forward_one_shot(&ep, &params, &spec).map_err(fail)?;
    let tuning = post.tuning.as_ref().expect("tuning enabled");
    let (_, h, w) = ep.supports[0].image.dims3().map_err(fail)?;
    let grad = gradient_image(&tuning.gradient, (h, w)).map_err(fail)?;
    debug_assert_eq!(tuning.gradient.shape()[1] * FEATURE_STRIDE, h);

    create_dir(&cfg.out_dir)?;
    let dir = &cfg.out_dir;
    write_image_ppm(&ep.query_image, dir.join(RENDER_FILES[0])).map_err(fail)?;
    write_image_ppm(&ep.supports[0].image, dir.join(RENDER_FILES[1])).map_err(fail)?;
    write_mask_pgm(&ep.query_mask, dir.join(RENDER_FILES[2])).map_err(fail)?;
    write_mask_pgm(&pre.query.mask, dir.join(RENDER_FILES[3])).map_err(fail)?;
    write_mask_pgm(&post.query.mask, dir.join(RENDER_FILES[4])).map_err(fail)?;
    write_gray_pgm(&grad, dir.join(RENDER_FILES[5])).map_err(fail)?;
    Ok(dir.clone())
}
