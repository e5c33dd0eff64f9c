//! Seeded phantom datasets and their on-disk manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::volcore::{load_mask, load_volume, save_mask, save_volume, write_atomic, BinaryMask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub phantom: PhantomConfig,
    pub train_cases: usize,
    pub test_cases: usize,
    /// Drives the per-case phantom seeds; `phantom.seed` is ignored.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            train_cases: 40,
            test_cases: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub phantom: PhantomConfig,
    pub cases: Vec<CaseEntry>,
}

/// A labeled raw volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub split: Split,
    pub image: Volume,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Case> {
        self.cases.iter().filter(|c| c.split == split).cloned().collect()
    }
}

/// Generates every case in memory. Case `i` is drawn with the `i`-th
/// output of a generator seeded by `cfg.seed`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.train_cases + cfg.test_cases == 0 {
        return Err(Error::config("dataset", "needs at least one case"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    let mut cases = Vec::new();
    for i in 0..cfg.train_cases + cfg.test_cases {
        let seed = rng.next_u64();
        let split = if i < cfg.train_cases { Split::Train } else { Split::Test };
        let id = format!("case{i:03}");
        let (image, mask) = generate_phantom(&PhantomConfig {
            seed,
            ..cfg.phantom.clone()
        })?;
        entries.push(CaseEntry {
            image: format!("{id}_image.hdr"),
            mask: format!("{id}_mask.hdr"),
            id: id.clone(),
            seed,
            split,
        });
        cases.push(Case { id, split, image, mask });
    }
    Ok(Dataset {
        manifest: Manifest {
            phantom: cfg.phantom.clone(),
            cases: entries,
        },
        cases,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes volumes, masks and `manifest.json` into `dir`. The manifest is
/// written last so a readable manifest implies complete case files.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, case) in ds.manifest.cases.iter().zip(&ds.cases) {
        save_volume(&dir.join(&entry.image), &case.image)?;
        save_mask(&dir.join(&entry.mask), &case.mask)?;
    }
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, serde_json::to_string_pretty(&ds.manifest)?.as_bytes())?;
    Ok(path)
}

/// Reads a manifest (or the manifest inside a directory) and its cases.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.cases.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} lists no cases",
            manifest_path.display()
        )));
    }
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for e in &manifest.cases {
        let image = load_volume(&dir.join(&e.image))?;
        let mask = load_mask(&dir.join(&e.mask))?;
        image.ensure_same_geometry(&mask)?;
        cases.push(Case {
            id: e.id.clone(),
            split: e.split,
            image,
            mask,
        });
    }
    Ok(Dataset { manifest, cases })
}
