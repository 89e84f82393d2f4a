//! Externally supplied datasets laid out as
//! `images/<class>/<id>.ppm` and `masks/<class>/<id>.pgm`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::shapes::mix_seed;
use super::{
    check_shots, draw_episode_plan, load_image_ppm, load_mask_pgm, ClassId, Episode, EpisodeError, FoldSplit, Mode,
    Shot, NUM_CLASSES,
};

#[derive(Clone, Debug)]
pub struct DirectoryDataset {
    root: PathBuf,
    /// Instance ids per class, sorted, restricted to ids with both an image and a mask.
    instances: BTreeMap<ClassId, Vec<String>>,
}

fn list_dir(path: &Path) -> Result<Vec<PathBuf>, EpisodeError> {
    let entries = fs::read_dir(path).map_err(|source| EpisodeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| EpisodeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

impl DirectoryDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<DirectoryDataset, EpisodeError> {
        let root = root.as_ref().to_path_buf();
        let mut instances = BTreeMap::new();
        for class_dir in list_dir(&root.join("images"))? {
            let Some(name) = class_dir.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Ok(class_id) = name.parse::<ClassId>() else {
                continue;
            };
            if !(1..=NUM_CLASSES as ClassId).contains(&class_id) {
                return Err(EpisodeError::InvalidClass(class_id));
            }
            let mut ids = Vec::new();
            for file in list_dir(&class_dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("ppm") {
                    continue;
                }
                let Some(id) = file.file_stem().and_then(|s| s.to_str()) else {
                    continue;
                };
                if root.join("masks").join(name).join(format!("{id}.pgm")).is_file() {
                    ids.push(id.to_string());
                }
            }
            if !ids.is_empty() {
                instances.insert(class_id, ids);
            }
        }
        if instances.is_empty() {
            return Err(EpisodeError::Dataset(format!(
                "no image/mask pairs under {}",
                root.display()
            )));
        }
        Ok(DirectoryDataset { root, instances })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.instances.keys().copied()
    }

    pub fn instance_count(&self, class_id: ClassId) -> usize {
        self.instances.get(&class_id).map_or(0, Vec::len)
    }

    pub fn load(&self, class_id: ClassId, id: &str) -> Result<Shot, EpisodeError> {
        let image = load_image_ppm(
            self.root
                .join("images")
                .join(class_id.to_string())
                .join(format!("{id}.ppm")),
        )?;
        let mask = load_mask_pgm(
            self.root
                .join("masks")
                .join(class_id.to_string())
                .join(format!("{id}.pgm")),
        )?;
        if image.shape()[1..] != mask.shape()[1..] {
            return Err(EpisodeError::Dataset(format!(
                "class {class_id} id {id}: image {:?} and mask {:?} differ in size",
                image.shape(),
                mask.shape()
            )));
        }
        Ok(Shot { image, mask })
    }

    /// Samples an episode among the split's classes that have at least
    /// `k + 1` instances on disk.
    pub fn sample_episode(&self, split: &FoldSplit, mode: Mode, k: usize, seed: u64) -> Result<Episode, EpisodeError> {
        check_shots(k)?;
        let eligible: Vec<ClassId> = split
            .classes(mode)
            .iter()
            .copied()
            .filter(|&c| self.instance_count(c) > k)
            .collect();
        if eligible.is_empty() {
            return Err(EpisodeError::Dataset(format!(
                "no {mode:?} class of fold {} has {} or more instances",
                split.fold,
                k + 1
            )));
        }
        let (class_id, _) = draw_episode_plan(&eligible, k, seed);
        let ids = &self.instances[&class_id];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD15C));
        let picks = sample(&mut rng, ids.len(), k + 1).into_vec();
        let mut shots = picks
            .iter()
            .map(|&i| self.load(class_id, &ids[i]))
            .collect::<Result<Vec<_>, _>>()?;
        let query = shots.remove(0);
        if let Some(i) = shots.iter().position(|s| s.mask.data().iter().all(|&v| v == 0.0)) {
            return Err(EpisodeError::Dataset(format!(
                "class {class_id} id {}: support mask is empty",
                ids[picks[i + 1]]
            )));
        }
        Ok(Episode {
            episode_id: seed,
            class_id,
            query_image: query.image,
            query_mask: query.mask,
            supports: shots,
        })
    }
}
