//! Dataset manifests: a JSON array of image records. Paths are stored
//! relative to the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bytes, tensor_file, write_bytes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub label: Label,
    pub seed: u64,
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        DatasetManifest {
            root: root.into(),
            records,
        }
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Checks id uniqueness and that anomalous records carry masks. With
    /// `check_files`, also that every referenced file exists.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid("manifest", format!("duplicate id {}", r.id)));
            }
            if r.label == Label::Anomalous && r.mask_path.is_none() {
                return Err(Error::invalid("manifest", format!("anomalous record {} has no mask", r.id)));
            }
            if check_files {
                for p in std::iter::once(&r.image_path).chain(r.mask_path.as_ref()) {
                    let full = self.resolve(p);
                    if !full.is_file() {
                        return Err(Error::io(
                            &full,
                            std::io::Error::new(std::io::ErrorKind::NotFound, format!("referenced by record {}", r.id)),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Refuses anything but normal records (training protocol).
    pub fn require_normal_only(&self) -> Result<()> {
        if let Some(r) = self.records.iter().find(|r| r.label != Label::Normal) {
            return Err(Error::Protocol(format!(
                "training data must be normal only, but record {} is labeled anomalous",
                r.id
            )));
        }
        Ok(())
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<Tensor<f32>> {
        tensor_file::read(&self.resolve(&record.image_path))
    }

    pub fn load_mask(&self, record: &ManifestRecord) -> Result<Option<Tensor<f32>>> {
        record
            .mask_path
            .as_ref()
            .map(|p| tensor_file::read(&self.resolve(p)))
            .transpose()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.records).expect("records serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_json().as_bytes())
    }

    /// Reads and validates a manifest, resolving paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let records: Vec<ManifestRecord> =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = DatasetManifest::new(root, records);
        manifest.validate(true)?;
        Ok(manifest)
    }
}
