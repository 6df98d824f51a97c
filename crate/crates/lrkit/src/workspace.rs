//! On-disk layout: `runs.jsonl`, `config.json` and `artifacts/<subdir>/`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use lrkit_core::fit::DEFAULT_MIN_TOKENS;
use lrkit_core::lawfit::Units;
use lrkit_core::oracle::{SweepDesign, REFERENCE_LR_GRID};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{self, ArtifactError, Kind, Record, Written};
use crate::runs::RunStore;

pub const ENV_VAR: &str = "LRKIT_WORKSPACE";
pub const RUNS_FILE: &str = "runs.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const SUBDIRS: [&str; 6] = ["fits", "laws", "plans", "traces", "reports", "inputs"];

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: invalid config: {message}")]
    Config { path: PathBuf, message: String },
}

/// Unit system used when reporting laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitName {
    #[default]
    Raw,
    Billions,
}

impl UnitName {
    pub fn units(self) -> Units {
        match self {
            UnitName::Raw => Units::RAW,
            UnitName::Billions => Units::BILLIONS,
        }
    }
}

/// Defaults for grids, units and tolerances; every field is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub d_grid: Vec<u64>,
    pub lr_grid: Vec<f64>,
    pub min_tokens: u64,
    pub units: UnitName,
    pub gamma_floor: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d_grid: SweepDesign::reference().d_grid,
            lr_grid: REFERENCE_LR_GRID.to_vec(),
            min_tokens: DEFAULT_MIN_TOKENS,
            units: UnitName::Raw,
            gamma_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub config: Config,
}

impl Workspace {
    /// Opens `root` without creating anything; a missing config means defaults.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let root = root.into();
        let path = root.join(CONFIG_FILE);
        let config = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| WorkspaceError::Config {
                path: path.clone(),
                message: e.to_string(),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Config::default(),
            Err(source) => return Err(WorkspaceError::Io { path, source }),
        };
        Ok(Self { root, config })
    }

    /// Opens `root`, creating the directory layout if needed.
    pub fn init(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let root = root.into();
        for sub in SUBDIRS {
            let dir = root.join("artifacts").join(sub);
            fs::create_dir_all(&dir).map_err(|source| WorkspaceError::Io { path: dir, source })?;
        }
        Self::open(root)
    }

    pub fn runs(&self) -> RunStore {
        RunStore::new(self.root.join(RUNS_FILE))
    }

    pub fn artifact_dir(&self, sub: &str) -> PathBuf {
        self.root.join("artifacts").join(sub)
    }

    pub fn write(&self, record: &Record) -> Result<Written, ArtifactError> {
        artifact::write(&self.artifact_dir(record.kind.subdir()), record)
    }

    /// Resolves an artifact reference: an existing path, a path relative to
    /// the workspace root, or a bare `<kind>-<digest>` file name.
    pub fn resolve(&self, reference: &Path) -> PathBuf {
        if reference.exists() {
            return reference.to_path_buf();
        }
        let rooted = self.root.join(reference);
        if rooted.exists() {
            return rooted;
        }
        let name = reference.to_string_lossy();
        let file = if name.ends_with(".json") {
            name.to_string()
        } else {
            format!("{name}.json")
        };
        if let Some(kind) = file.split_once('-').and_then(|(k, _)| Kind::from_name(k)) {
            let candidate = self.artifact_dir(kind.subdir()).join(&file);
            if candidate.exists() {
                return candidate;
            }
        }
        reference.to_path_buf()
    }
}
