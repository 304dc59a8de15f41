//! On-disk dataset directory: catalog, split, manifests and images.
//!
//! ```text
//! catalog.jsonl   attribute groups
//! split.json      {"holdout": ["Group:value", ...]}
//! train.jsonl     sample manifest
//! test.jsonl      sample manifest
//! images/*.ppm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{load_catalog, AttrRef, AttributeCatalog, CatalogError};
use crate::image::{Image, ImageError};
use crate::synth::{read_manifest, write_manifest, ManifestError, SampleRecord, SyntheticDataset};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: ImageError },
    #[error("split file: {0}")]
    Split(String),
    #[error("train manifest references held-out attribute `{0}`")]
    HoldoutInTrain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub holdout: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct DataSplit {
    pub records: Vec<SampleRecord>,
    pub images: Vec<Image>,
    pub labels: Vec<Vec<AttrRef>>,
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A loaded dataset directory; `catalog` carries the held-out split.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub catalog: AttributeCatalog,
    pub train: DataSplit,
    pub test: DataSplit,
}

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const IMAGE_DIR: &str = "images";

/// Writes `dataset` under `dir`. Image paths in the manifests are relative
/// to `dir`.
pub fn write_data_dir(dir: &Path, catalog: &AttributeCatalog, dataset: &SyntheticDataset) -> Result<(), DataError> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    catalog.save(&dir.join(CATALOG_FILE))?;
    let split = SplitFile {
        holdout: catalog.holdout_labels(),
    };
    fs::write(
        dir.join(SPLIT_FILE),
        serde_json::to_string_pretty(&split).expect("split serializes") + "\n",
    )?;
    for (name, part) in [("train", &dataset.train), ("test", &dataset.test)] {
        let mut records = Vec::with_capacity(part.images.len());
        for (i, (img, labels)) in part.images.iter().zip(&part.labels).enumerate() {
            let rel = format!("{IMAGE_DIR}/{name}_{i:05}.ppm");
            let path = dir.join(&rel);
            img.write_ppm(&path).map_err(|source| DataError::Image { path, source })?;
            records.push(SampleRecord::from_refs(rel, catalog, labels));
        }
        write_manifest(&records, &dir.join(format!("{name}.jsonl")))?;
    }
    Ok(())
}

pub fn read_split(dir: &Path, catalog: &AttributeCatalog) -> Result<AttributeCatalog, DataError> {
    let path = dir.join(SPLIT_FILE);
    let split: SplitFile = if path.exists() {
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| DataError::Split(e.to_string()))?
    } else {
        SplitFile::default()
    };
    Ok(catalog.with_holdout_labels(&split.holdout)?)
}

fn load_split(dir: &Path, file: &str, catalog: &AttributeCatalog) -> Result<DataSplit, DataError> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(DataSplit::default());
    }
    let records = read_manifest(&path, catalog)?;
    let mut images = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in &records {
        let p = dir.join(&r.image);
        images.push(Image::read_ppm(&p).map_err(|source| DataError::Image { path: p, source })?);
        labels.push(r.resolve(catalog).expect("validated by read_manifest"));
    }
    Ok(DataSplit {
        records,
        images,
        labels,
    })
}

pub fn load_data_dir(dir: &Path) -> Result<DataDir, DataError> {
    let catalog = read_split(dir, &load_catalog(&dir.join(CATALOG_FILE))?)?;
    let train = load_split(dir, TRAIN_FILE, &catalog)?;
    if let Some(a) = train.labels.iter().flatten().find(|&&a| !catalog.is_seen(a)) {
        return Err(DataError::HoldoutInTrain(catalog.label(*a)));
    }
    let test = load_split(dir, TEST_FILE, &catalog)?;
    Ok(DataDir { catalog, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::synthetic_catalog;
    use crate::synth::{generate_dataset, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn write_then_load() {
        let cat = synthetic_catalog().with_holdout_labels(&["Hair:white"]).unwrap();
        let spec = SyntheticSpec::for_catalog(&cat, 32, 32, 0.03).unwrap();
        let ds = generate_dataset(&spec, &cat, 6, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_data_dir(dir.path(), &cat, &ds).unwrap();
        let loaded = load_data_dir(dir.path()).unwrap();
        assert_eq!(loaded.catalog, cat);
        assert_eq!(loaded.train.len(), 6);
        assert_eq!(loaded.test.len(), 3);
        assert_eq!(loaded.train.labels, ds.train.labels);
        assert_eq!(loaded.train.images[0], ds.train.images[0].quantized());
    }

    #[test]
    fn holdout_in_train_is_rejected() {
        let cat = synthetic_catalog();
        let spec = SyntheticSpec::for_catalog(&cat, 32, 32, 0.0).unwrap();
        let ds = generate_dataset(&spec, &cat, 40, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_data_dir(dir.path(), &cat, &ds).unwrap();
        fs::write(dir.path().join(SPLIT_FILE), r#"{"holdout":["Hair:long"]}"#).unwrap();
        assert!(matches!(load_data_dir(dir.path()), Err(DataError::HoldoutInTrain(_))));
    }
}
