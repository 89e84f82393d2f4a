//! Synthetic few-shot segmentation data: shape classes, fold splits,
//! episode sampling and PPM/PGM image I/O.

mod dataset;
mod pnm;
mod shapes;

pub use dataset::DirectoryDataset;
pub use pnm::{
    load_image_ppm, load_mask_pgm, parse_image_ppm, parse_mask_pgm, write_gray_pgm, write_image_ppm, write_mask_pgm,
};
pub use shapes::{
    mix_seed, render_instance, ShapeClass, ShapeKind, Texture, MAX_AREA_FRACTION, MIN_AREA_FRACTION, MIN_IMAGE_SIDE,
};

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub type ClassId = u8;

pub const NUM_CLASSES: usize = 20;
pub const NUM_FOLDS: u8 = 4;
pub const DEFAULT_IMAGE_SIZE: (usize, usize) = (64, 64);

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("fold {0} out of range; expected 0..=3")]
    InvalidFold(u8),
    #[error("class id {0} out of range; expected 1..=20")]
    InvalidClass(ClassId),
    #[error("shot count {0} not supported; expected 1 or 5")]
    InvalidShots(usize),
    #[error("image size {h}x{w} below the 32x32 minimum")]
    ImageTooSmall { h: usize, w: usize },
    #[error("{path}: unsupported format {magic}")]
    UnsupportedFormat { path: String, magic: String },
    #[error("{path}: malformed header: {detail}")]
    MalformedHeader { path: String, detail: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Spacing between the first test classes of consecutive folds.
///
/// `Four` enumerates `{4i+1, …, 4i+5}` literally, so neighbouring folds
/// share one class. `Five` gives the usual disjoint blocks `{5i+1, …, 5i+5}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum FoldStride {
    Four,
    #[default]
    Five,
}

impl TryFrom<u8> for FoldStride {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            4 => Ok(FoldStride::Four),
            5 => Ok(FoldStride::Five),
            other => Err(format!("fold_stride must be 4 or 5, got {other}")),
        }
    }
}

impl From<FoldStride> for u8 {
    fn from(s: FoldStride) -> u8 {
        match s {
            FoldStride::Four => 4,
            FoldStride::Five => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldSplit {
    pub fold: u8,
    pub stride: FoldStride,
    pub test_classes: Vec<ClassId>,
    pub train_classes: Vec<ClassId>,
}

pub fn make_fold(fold: u8, stride: FoldStride) -> Result<FoldSplit, EpisodeError> {
    if fold >= NUM_FOLDS {
        return Err(EpisodeError::InvalidFold(fold));
    }
    let s = u8::from(stride);
    let first = s * fold + 1;
    let test_classes: Vec<ClassId> = (first..first + 5).collect();
    let train_classes = (1..=NUM_CLASSES as ClassId)
        .filter(|c| !test_classes.contains(c))
        .collect();
    Ok(FoldSplit {
        fold,
        stride,
        test_classes,
        train_classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

impl FoldSplit {
    pub fn classes(&self, mode: Mode) -> &[ClassId] {
        match mode {
            Mode::Train => &self.train_classes,
            Mode::Test => &self.test_classes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Shot {
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub episode_id: u64,
    pub class_id: ClassId,
    pub query_image: Tensor,
    pub query_mask: Tensor,
    pub supports: Vec<Shot>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    /// Checks binary masks, non-empty supports and consistent sizes.
    pub fn validate(&self) -> Result<(), String> {
        let (_, h, w) = self.query_image.dims3().map_err(|e| e.to_string())?;
        let binary = |m: &Tensor| m.data().iter().all(|&v| v == 0.0 || v == 1.0);
        let check_pair = |img: &Tensor, mask: &Tensor, what: &str| -> Result<(), String> {
            if img.shape() != [3, h, w] || mask.shape() != [1, h, w] {
                return Err(format!(
                    "{what}: unexpected shapes {:?} / {:?}",
                    img.shape(),
                    mask.shape()
                ));
            }
            if !img.data().iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(format!("{what}: pixel outside [0,1]"));
            }
            if !binary(mask) {
                return Err(format!("{what}: mask not binary"));
            }
            Ok(())
        };
        check_pair(&self.query_image, &self.query_mask, "query")?;
        if self.supports.is_empty() {
            return Err("no supports".into());
        }
        for (i, shot) in self.supports.iter().enumerate() {
            check_pair(&shot.image, &shot.mask, &format!("support {i}"))?;
            if shot.mask.data().iter().all(|&v| v == 0.0) {
                return Err(format!("support {i}: empty mask"));
            }
        }
        Ok(())
    }
}

pub fn check_shots(k: usize) -> Result<(), EpisodeError> {
    match k {
        1 | 5 => Ok(()),
        other => Err(EpisodeError::InvalidShots(other)),
    }
}

/// Renders one synthetic instance with distractors drawn from every other class.
pub fn generate_instance(
    class: &ShapeClass,
    seed: u64,
    size: (usize, usize),
) -> Result<(Tensor, Tensor), EpisodeError> {
    let others: Vec<ClassId> = (1..=NUM_CLASSES as ClassId).filter(|&c| c != class.class_id).collect();
    render_instance(class, seed, size, &others)
}

/// Picks the episode class and `k + 1` distinct instance seeds.
pub(crate) fn draw_episode_plan(classes: &[ClassId], k: usize, seed: u64) -> (ClassId, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_id = classes[rng.gen_range(0..classes.len())];
    let mut seen = BTreeSet::new();
    let mut seeds = Vec::with_capacity(k + 1);
    while seeds.len() < k + 1 {
        let s: u64 = rng.gen();
        if seen.insert(s) {
            seeds.push(s);
        }
    }
    (class_id, seeds)
}

/// Samples a synthetic episode. Distractors only come from the split's
/// training classes, so test classes never leak into training images.
pub fn sample_episode(
    split: &FoldSplit,
    mode: Mode,
    k: usize,
    seed: u64,
    size: (usize, usize),
) -> Result<Episode, EpisodeError> {
    check_shots(k)?;
    let (class_id, seeds) = draw_episode_plan(split.classes(mode), k, seed);
    let class = ShapeClass::get(class_id)?;
    let mut pairs = seeds
        .iter()
        .map(|&s| render_instance(&class, s, size, &split.train_classes))
        .collect::<Result<Vec<_>, _>>()?;
    let (query_image, query_mask) = pairs.remove(0);
    Ok(Episode {
        episode_id: seed,
        class_id,
        query_image,
        query_mask,
        supports: pairs.into_iter().map(|(image, mask)| Shot { image, mask }).collect(),
    })
}

/// Where episodes come from: the procedural generator or a directory of files.
#[derive(Clone, Debug)]
pub enum EpisodeSource {
    Synthetic { size: (usize, usize) },
    Directory(DirectoryDataset),
}

impl EpisodeSource {
    pub fn sample(&self, split: &FoldSplit, mode: Mode, k: usize, seed: u64) -> Result<Episode, EpisodeError> {
        match self {
            EpisodeSource::Synthetic { size } => sample_episode(split, mode, k, seed, *size),
            EpisodeSource::Directory(ds) => ds.sample_episode(split, mode, k, seed),
        }
    }
}
