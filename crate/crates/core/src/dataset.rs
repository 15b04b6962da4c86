//! On-disk dataset loading: an annotation file plus its image directory, and
//! the optional instance pool used by instance paste.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::augment::{load_pool, InstanceCutout};
use crate::coco::{load_annotations, CocoDataset};
use crate::keypoints::AnnotatedImage;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root `{0}` has no annotations.json")]
    MissingAnnotations(PathBuf),
    #[error(transparent)]
    Coco(#[from] crate::coco::CocoError),
    #[error(transparent)]
    Pool(#[from] crate::augment::AugmentError),
}

/// A fully loaded dataset: decoded images with annotations, plus the pool.
pub struct Dataset {
    pub samples: Vec<AnnotatedImage>,
    pub pool: Vec<InstanceCutout>,
    pub coco: CocoDataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Load `root/annotations.json`, every referenced image, and `root/pool/`
/// when present.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let ann_path = root.join("annotations.json");
    if !ann_path.exists() {
        return Err(DatasetError::MissingAnnotations(root.to_path_buf()));
    }
    let coco = load_annotations(&ann_path)?;
    let samples = coco.load_images(root)?;
    let pool_dir = root.join("pool");
    let pool = if pool_dir.is_dir() {
        load_pool(&pool_dir)?
    } else {
        Vec::new()
    };
    Ok(Dataset {
        samples,
        pool,
        coco,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset_sized;

    #[test]
    fn generated_dataset_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_dataset_sized(3, 11, dir.path(), 96).unwrap();
        assert_eq!(summary.images, 3);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(!ds.pool.is_empty());
        for sample in &ds.samples {
            assert!(!sample.persons.is_empty());
            assert!(sample.target_index < sample.persons.len());
        }
    }
}
