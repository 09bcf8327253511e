use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub identity_index: usize,
    pub view_label: String,
    pub covariate_label: String,
    pub frame_count: usize,
    /// Directory holding the frame images, relative to the dataset root.
    pub relative_path: String,
}

/// Index of a silhouette dataset on disk.
///
/// Layout is `<root>/<id>/<covariate>/<view>/<seq>/NNNN.png` with the
/// manifest at `<root>/manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub n_ids: usize,
    pub views: Vec<String>,
    pub covariates: Vec<String>,
}

impl DatasetManifest {
    pub fn new(root_path: impl Into<PathBuf>, n_ids: usize) -> Self {
        Self {
            root_path: root_path.into(),
            entries: Vec::new(),
            n_ids,
            views: Vec::new(),
            covariates: Vec::new(),
        }
    }

    pub fn entry(&self, sequence_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sequence_id == sequence_id)
    }

    pub fn sequence_dir(&self, entry: &ManifestEntry) -> PathBuf {
        self.root_path.join(&entry.relative_path)
    }

    /// Identities that actually have at least one entry.
    pub fn present_ids(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.identity_index).collect()
    }

    /// Deduplicate and sort the label vocabularies in place.
    pub fn normalize_vocabularies(&mut self) {
        for labels in [&mut self.views, &mut self.covariates] {
            labels.sort();
            labels.dedup();
        }
    }

    /// Check the structural invariants without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        let views: HashSet<&str> = self.views.iter().map(String::as_str).collect();
        let covariates: HashSet<&str> = self.covariates.iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        for entry in &self.entries {
            let invalid = |reason: String| Error::Validation {
                entry: entry.sequence_id.clone(),
                reason,
            };
            if !seen.insert(entry.sequence_id.as_str()) {
                return Err(invalid("duplicate sequence_id".into()));
            }
            if entry.identity_index >= self.n_ids {
                return Err(invalid(format!(
                    "identity_index {} >= n_ids {}",
                    entry.identity_index, self.n_ids
                )));
            }
            if !views.contains(entry.view_label.as_str()) {
                return Err(invalid(format!(
                    "view label {:?} not in vocabulary",
                    entry.view_label
                )));
            }
            if !covariates.contains(entry.covariate_label.as_str()) {
                return Err(invalid(format!(
                    "covariate label {:?} not in vocabulary",
                    entry.covariate_label
                )));
            }
            if entry.frame_count == 0 {
                return Err(invalid("frame_count is zero".into()));
            }
        }
        Ok(())
    }

    /// Write `manifest.json` under `root_path` atomically.
    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root_path)?;
        let path = self.root_path.join(MANIFEST_FILE);
        let tmp = self.root_path.join(format!(".{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::load(&path, e))?;
        fs::write(&tmp, text + "\n")?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

/// Load and validate a manifest. `path` may be the manifest file itself or
/// the dataset root containing it.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::load(&file, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::load(&file, e))?;
    manifest.root_path = file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.normalize_vocabularies();
    manifest.validate()?;
    for entry in &manifest.entries {
        let dir = manifest.sequence_dir(entry);
        if !dir.is_dir() {
            return Err(Error::load(dir, "sequence directory does not exist"));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, identity: usize) -> ManifestEntry {
        ManifestEntry {
            sequence_id: id.into(),
            identity_index: identity,
            view_label: "090".into(),
            covariate_label: "NM".into(),
            frame_count: 3,
            relative_path: id.into(),
        }
    }

    fn write(dir: &Path, manifest: &DatasetManifest) {
        for e in &manifest.entries {
            fs::create_dir_all(dir.join(&e.relative_path)).unwrap();
        }
        let mut m = manifest.clone();
        m.root_path = dir.to_path_buf();
        m.save().unwrap();
    }

    fn sample() -> DatasetManifest {
        DatasetManifest {
            root_path: PathBuf::new(),
            entries: vec![entry("a", 0), entry("b", 0), entry("c", 1), entry("d", 1)],
            n_ids: 2,
            views: vec!["090".into(), "090".into()],
            covariates: vec!["NM".into()],
        }
    }

    #[test]
    fn loads_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &sample());
        let m = load_dataset(dir.path()).unwrap();
        assert_eq!(m.n_ids, 2);
        assert_eq!(m.entries.len(), 4);
        assert_eq!(m.views, vec!["090".to_string()]);
        assert_eq!(m.root_path, dir.path());
    }

    #[test]
    fn vocabularies_sorted_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample();
        m.covariates = vec!["NM".into(), "CL".into(), "BG".into(), "NM".into()];
        write(dir.path(), &m);
        let m = load_dataset(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.covariates, vec!["BG", "CL", "NM"]);
    }

    #[test]
    fn missing_sequence_dir_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &sample());
        fs::remove_dir(dir.path().join("c")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Load { path, .. }) => assert!(path.ends_with("c")),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains(MANIFEST_FILE));
    }

    #[test]
    fn identity_at_n_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample();
        m.entries[3].identity_index = 2;
        write(dir.path(), &m);
        match load_dataset(dir.path()) {
            Err(Error::Validation { entry, .. }) => assert_eq!(entry, "d"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_and_duplicates_rejected() {
        let mut m = sample();
        m.entries[1].covariate_label = "XX".into();
        assert!(matches!(m.validate(), Err(Error::Validation { .. })));
        let mut m = sample();
        m.entries[1].sequence_id = "a".into();
        assert!(matches!(m.validate(), Err(Error::Validation { .. })));
    }
}
