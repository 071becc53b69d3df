//! Versioned snapshot persistence with atomic activation.
//!
//! Layout under the data directory:
//!
//! ```text
//! snapshots/manifest.json      active id plus one entry per published snapshot
//! snapshots/<id>/...           the artifacts that built snapshot <id>
//! ```
//!
//! Derived tables are rebuilt from the stored artifacts on start, so a
//! snapshot directory is self-contained.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::snapshot::{build_snapshot, valid_dataset_name, PublishError, PublishInputs, Snapshot, SnapshotMeta, Stage};
use crate::snapshot::{ARTIFACTS, DATASETS_DIR};

pub const SNAPSHOTS_DIR: &str = "snapshots";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub active: Option<u64>,
    pub snapshots: Vec<SnapshotMeta>,
}

impl Manifest {
    pub fn next_id(&self) -> u64 {
        self.snapshots.iter().map(|s| s.snapshot_id).max().unwrap_or(0) + 1
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("corrupt manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("active snapshot {id} cannot be restored: {source}")]
    Restore {
        id: u64,
        #[source]
        source: PublishError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One uploaded artifact. Names are canonical file names, or
/// `datasets/<name>.csv` for imported count tables.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

fn artifact_path(name: &str) -> Option<PathBuf> {
    if ARTIFACTS.contains(&name) {
        return Some(PathBuf::from(name));
    }
    let stem = name.strip_prefix("datasets/")?.strip_suffix(".csv")?;
    valid_dataset_name(stem).then(|| Path::new(DATASETS_DIR).join(format!("{stem}.csv")))
}

pub fn is_known_artifact(name: &str) -> bool {
    artifact_path(name).is_some()
}

/// Holds the active snapshot. Readers clone an `Arc` and keep a consistent
/// view for as long as they hold it; publishing never mutates a live
/// snapshot.
#[derive(Debug)]
pub struct SnapshotStore {
    root: PathBuf,
    active: RwLock<Option<Arc<Snapshot>>>,
    manifest: Mutex<Manifest>,
}

impl SnapshotStore {
    /// Opens (creating if needed) the store under `data_dir` and restores the
    /// active snapshot.
    pub fn open(data_dir: &Path) -> Result<Self, StoreError> {
        let root = data_dir.join(SNAPSHOTS_DIR);
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest: Manifest = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            serde_json::from_str(&text).map_err(|e| StoreError::Manifest {
                path: manifest_path.display().to_string(),
                message: e.to_string(),
            })?
        } else {
            Manifest::default()
        };
        let active =
            match manifest.active {
                Some(id) => {
                    let meta = manifest.snapshots.iter().find(|m| m.snapshot_id == id).ok_or_else(|| {
                        StoreError::Manifest {
                            path: manifest_path.display().to_string(),
                            message: format!("active snapshot {id} is not listed"),
                        }
                    })?;
                    let inputs = PublishInputs::from_dir(&root.join(id.to_string()))
                        .map_err(|source| StoreError::Restore { id, source })?;
                    let snap = build_snapshot(inputs, id, meta.created_at.clone())
                        .map_err(|source| StoreError::Restore { id, source })?;
                    Some(Arc::new(snap))
                }
                None => None,
            };
        Ok(Self {
            root,
            active: RwLock::new(active),
            manifest: Mutex::new(manifest),
        })
    }

    pub fn active(&self) -> Option<Arc<Snapshot>> {
        self.active.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Publishes from a directory already in the canonical layout.
    pub fn publish_dir(&self, source: &Path) -> Result<SnapshotMeta, PublishError> {
        let mut artifacts = Vec::new();
        let mut names: Vec<String> = ARTIFACTS.iter().map(|s| s.to_string()).collect();
        if let Ok(entries) = fs::read_dir(source.join(DATASETS_DIR)) {
            for e in entries.flatten() {
                names.push(format!("{DATASETS_DIR}/{}", e.file_name().to_string_lossy()));
            }
        }
        for name in names {
            let path = source.join(&name);
            if path.is_file() {
                let bytes = fs::read(&path).map_err(|e| PublishError::new(Stage::Upload, format!("{name}: {e}")))?;
                artifacts.push(Artifact { name, bytes });
            }
        }
        self.publish(artifacts)
    }

    /// Stages the artifacts into a fresh directory, builds the snapshot and,
    /// only if every stage succeeds, records it and swaps it in. On failure
    /// the staging directory is removed and the active snapshot is untouched.
    pub fn publish(&self, artifacts: Vec<Artifact>) -> Result<SnapshotMeta, PublishError> {
        let mut manifest = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
        let id = manifest.next_id();
        let staging = self.root.join(format!("{id}.staging"));
        let result = self.stage_and_build(&staging, id, artifacts);
        let snap = match result {
            Ok(s) => s,
            Err(e) => {
                let _ = fs::remove_dir_all(&staging);
                return Err(e);
            }
        };
        let final_dir = self.root.join(id.to_string());
        let persist = |e: io::Error| PublishError::new(Stage::Persist, e);
        if let Err(e) = fs::rename(&staging, &final_dir) {
            let _ = fs::remove_dir_all(&staging);
            return Err(persist(e));
        }
        let mut next = manifest.clone();
        next.active = Some(id);
        next.snapshots.push(snap.meta.clone());
        let manifest_path = self.root.join(MANIFEST_FILE);
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        let body = serde_json::to_vec_pretty(&next).map_err(|e| PublishError::new(Stage::Persist, e))?;
        if let Err(e) = fs::write(&tmp, body).and_then(|_| fs::rename(&tmp, &manifest_path)) {
            let _ = fs::remove_dir_all(&final_dir);
            return Err(persist(e));
        }
        *manifest = next;
        let meta = snap.meta.clone();
        *self.active.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(snap));
        tracing::info!(snapshot_id = id, "snapshot activated");
        Ok(meta)
    }

    fn stage_and_build(&self, staging: &Path, id: u64, artifacts: Vec<Artifact>) -> Result<Snapshot, PublishError> {
        let upload = |m: String| PublishError::new(Stage::Upload, m);
        if staging.exists() {
            fs::remove_dir_all(staging).map_err(|e| upload(e.to_string()))?;
        }
        fs::create_dir_all(staging.join(DATASETS_DIR)).map_err(|e| upload(e.to_string()))?;
        for a in artifacts {
            let rel = artifact_path(&a.name).ok_or_else(|| upload(format!("unknown artifact {:?}", a.name)))?;
            fs::write(staging.join(rel), &a.bytes).map_err(|e| upload(format!("{}: {e}", a.name)))?;
        }
        let inputs = PublishInputs::from_dir(staging)?;
        build_snapshot(inputs, id, chrono::Utc::now().to_rfc3339())
    }
}
