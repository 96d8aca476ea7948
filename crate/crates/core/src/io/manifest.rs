//! Case lists and the train/validation split.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prep::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Files of one case. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub case_id: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub mask: PathBuf,
}

impl CaseFiles {
    /// `{case_id}_{source|target|mask}.mha` naming.
    pub fn conventional(case_id: &str) -> Self {
        Self {
            case_id: case_id.to_string(),
            source: format!("{case_id}_source.mha").into(),
            target: format!("{case_id}_target.mha").into(),
            mask: format!("{case_id}_mask.mha").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub files: CaseFiles,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub modality: Modality,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn cases(&self, split: Split) -> impl Iterator<Item = &CaseFiles> {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| &e.files)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.files.case_id) {
                return Err(Error::Data(format!(
                    "case {} appears more than once",
                    e.files.case_id
                )));
            }
        }
        Ok(())
    }

    /// Fails naming the first referenced file that does not exist.
    pub fn check_paths(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.files.source, &e.files.target, &e.files.mask] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Data(format!(
                        "case {}: missing file {}",
                        e.files.case_id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        m.check_paths()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Seeded shuffle, then `floor(n·ratio)` cases to train and the rest to val.
pub fn split_manifest(
    cases: Vec<CaseFiles>,
    modality: Modality,
    ratio: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain {
            what: "split ratio",
            value: ratio,
            domain: "(0, 1)",
        });
    }
    if cases.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 cases to split, got {}",
            cases.len()
        )));
    }
    let n_train = (cases.len() as f64 * ratio).floor() as usize;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Val; cases.len()];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    let manifest = DatasetManifest {
        modality,
        entries: cases
            .into_iter()
            .zip(split)
            .map(|(files, split)| ManifestEntry { files, split })
            .collect(),
        root: PathBuf::new(),
    };
    manifest.validate()?;
    Ok(manifest)
}
