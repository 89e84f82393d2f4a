use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sst_core::episodes::{make_fold, DirectoryDataset, EpisodeSource, FoldSplit, FoldStride, MIN_IMAGE_SIDE};
use sst_core::model::{FusionMode, ModelSpec, ScoreSource};
use sst_core::nn::OptimizerConfig;
use sst_core::train_eval::{EvalConfig, TrainConfig};

use crate::CliError;

/// Everything a run needs. Unknown keys are rejected; omitted keys take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `[height, width]` of synthetic images.
    pub image_size: [usize; 2],
    pub fold: u8,
    pub fold_stride: FoldStride,
    pub k: usize,
    pub eta: f32,
    pub inner_steps: usize,
    /// Runs the support feature update at all.
    pub tuning: bool,
    pub score_source: ScoreSource,
    pub lambda_aux: f32,
    pub fusion_mode: FusionMode,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub n_train_episodes: usize,
    pub n_eval_episodes: usize,
    /// Seed of the evaluation episode stream.
    pub eval_seed: u64,
    /// Checkpoint written by `train` and read by `eval` and `render`.
    pub checkpoint: PathBuf,
    /// Optional starting point for `train`.
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Directory with `images/<class>/<id>.ppm` and `masks/<class>/<id>.pgm`;
    /// synthetic episodes are generated when absent.
    pub dataset_dir: Option<PathBuf>,
}

/// Learning rate used by the default configuration. The network is
/// trained from scratch here, which needs a larger step than fine-tuning
/// a pretrained backbone.
pub const DESK_LEARNING_RATE: f32 = 0.005;

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelSpec::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            image_size: [64, 64],
            fold: 0,
            fold_stride: FoldStride::Five,
            k: 1,
            eta: model.eta,
            inner_steps: model.inner_steps,
            tuning: model.tuning,
            score_source: model.score_source,
            lambda_aux: train.lambda_aux,
            fusion_mode: FusionMode::Weighted,
            optimizer: OptimizerConfig {
                learning_rate: DESK_LEARNING_RATE,
                ..OptimizerConfig::default()
            },
            batch_size: train.batch_size,
            n_train_episodes: train.n_episodes,
            n_eval_episodes: EvalConfig::default().n_episodes,
            eval_seed: 1000,
            checkpoint: PathBuf::from("out/model.ckpt"),
            init_checkpoint: None,
            out_dir: PathBuf::from("out"),
            dataset_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let [h, w] = self.image_size;
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE || h % 4 != 0 || w % 4 != 0 {
            return Err(format!(
                "image_size must be at least 32 and a multiple of 4, got {h}x{w}"
            ));
        }
        if self.fold > 3 {
            return Err(format!("fold must be in 0..=3, got {}", self.fold));
        }
        if !matches!(self.k, 1 | 5) {
            return Err(format!("k must be 1 or 5, got {}", self.k));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(format!("eta must be finite and non-negative, got {}", self.eta));
        }
        if self.inner_steps == 0 {
            return Err("inner_steps must be at least 1".into());
        }
        if !(self.lambda_aux.is_finite() && self.lambda_aux >= 0.0) {
            return Err(format!(
                "lambda_aux must be finite and non-negative, got {}",
                self.lambda_aux
            ));
        }
        self.optimizer.validate().map_err(|e| e.to_string())?;
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.n_train_episodes == 0 {
            return Err("n_train_episodes must be at least 1".into());
        }
        if self.n_eval_episodes == 0 {
            return Err("n_eval_episodes must be at least 1".into());
        }
        Ok(())
    }

    pub fn split(&self) -> Result<FoldSplit, CliError> {
        make_fold(self.fold, self.fold_stride).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn source(&self) -> Result<EpisodeSource, CliError> {
        match &self.dataset_dir {
            Some(dir) => Ok(EpisodeSource::Directory(
                DirectoryDataset::open(dir).map_err(|e| CliError::Failure(e.to_string()))?,
            )),
            None => Ok(EpisodeSource::Synthetic {
                size: (self.image_size[0], self.image_size[1]),
            }),
        }
    }

    pub fn model(&self) -> ModelSpec {
        ModelSpec {
            eta: self.eta,
            inner_steps: self.inner_steps,
            tuning: self.tuning,
            score_source: self.score_source,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_episodes: self.n_train_episodes,
            batch_size: self.batch_size,
            lambda_aux: self.lambda_aux,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_episodes: self.n_eval_episodes,
            k: self.k,
            seed: self.eval_seed,
        }
    }
}
