//! Content-addressed JSON artifacts: `<dir>/<kind>-<digest>.json`.
//!
//! The digest covers the whole record (kind included) serialized with sorted
//! keys, so an identical rerun resolves to the same file and is a no-op.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use lrkit_core::digest::sha256_hex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

pub const DIGEST_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact not found: {0}")]
    NotFound(PathBuf),
    #[error("{path}: expected a `{expected}` artifact, found `{found}`")]
    KindMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Artifact kinds and the workspace subdirectory each lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Ingest,
    PowerLaw,
    QuadLog,
    LrLaw,
    SearchPlan,
    ModuleLrTable,
    TransferPlan,
    SurfaceSpec,
    Trace,
    CoordCheck,
}

impl Kind {
    pub const ALL: [Kind; 10] = [
        Kind::Ingest,
        Kind::PowerLaw,
        Kind::QuadLog,
        Kind::LrLaw,
        Kind::SearchPlan,
        Kind::ModuleLrTable,
        Kind::TransferPlan,
        Kind::SurfaceSpec,
        Kind::Trace,
        Kind::CoordCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Ingest => "ingest",
            Kind::PowerLaw => "power_law",
            Kind::QuadLog => "quad_log",
            Kind::LrLaw => "lr_law",
            Kind::SearchPlan => "search_plan",
            Kind::ModuleLrTable => "module_lr_table",
            Kind::TransferPlan => "transfer_plan",
            Kind::SurfaceSpec => "surface_spec",
            Kind::Trace => "trace",
            Kind::CoordCheck => "coordcheck",
        }
    }

    pub fn from_name(name: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn subdir(self) -> &'static str {
        match self {
            Kind::Ingest | Kind::SurfaceSpec => "inputs",
            Kind::PowerLaw | Kind::QuadLog => "fits",
            Kind::LrLaw => "laws",
            Kind::SearchPlan | Kind::ModuleLrTable | Kind::TransferPlan => "plans",
            Kind::Trace | Kind::CoordCheck => "traces",
        }
    }
}

/// A record ready to be written: `kind` plus the body's fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: Kind,
    pub value: Value,
}

impl Record {
    /// Builds a record from any body that serializes to a JSON object.
    pub fn new(kind: Kind, body: &impl Serialize) -> Self {
        let mut map = match serde_json::to_value(body).expect("artifact bodies serialize") {
            Value::Object(m) => m,
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        map.insert("kind".into(), Value::String(kind.name().into()));
        Self {
            kind,
            value: Value::Object(map),
        }
    }

    /// Canonical bytes: pretty JSON with sorted keys and a trailing newline.
    pub fn bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(&self.value).expect("values serialize");
        out.push(b'\n');
        out
    }

    pub fn digest(&self) -> String {
        let mut d = sha256_hex(&self.bytes());
        d.truncate(DIGEST_LEN);
        d
    }

    pub fn file_name(&self) -> String {
        format!("{}-{}.json", self.kind.name(), self.digest())
    }
}

/// Where a record ended up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Written {
    pub path: PathBuf,
    pub digest: String,
    /// The file already existed with this digest and was left untouched.
    pub cached: bool,
}

/// Writes `record` under `dir` unless a file with its digest already exists.
pub fn write(dir: &Path, record: &Record) -> Result<Written, ArtifactError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ArtifactError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(record.file_name());
    let digest = record.digest();
    if path.exists() {
        return Ok(Written {
            path,
            digest,
            cached: true,
        });
    }
    let tmp = dir.join(format!(".{}.tmp", record.file_name()));
    fs::write(&tmp, record.bytes()).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(Written {
        path,
        digest,
        cached: false,
    })
}

/// Reads any artifact, returning its kind name and full JSON value.
pub fn read(path: &Path) -> Result<(String, Value), ArtifactError> {
    let text = fs::read_to_string(path).map_err(|source| match source.kind() {
        io::ErrorKind::NotFound => ArtifactError::NotFound(path.to_path_buf()),
        _ => ArtifactError::Io {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| ArtifactError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let kind = value
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| ArtifactError::Malformed {
            path: path.to_path_buf(),
            message: "no `kind` field".into(),
        })?
        .to_string();
    Ok((kind, value))
}

/// Reads an artifact of kind `expected` and deserializes its body.
pub fn load<T: DeserializeOwned>(path: &Path, expected: Kind) -> Result<T, ArtifactError> {
    let (kind, value) = read(path)?;
    if kind != expected.name() {
        return Err(ArtifactError::KindMismatch {
            path: path.to_path_buf(),
            expected: expected.name().into(),
            found: kind,
        });
    }
    serde_json::from_value(value).map_err(|e| ArtifactError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Body {
        b: f64,
        a: Vec<u64>,
    }

    #[test]
    fn names_embed_kind_and_digest() {
        let r = Record::new(
            Kind::LrLaw,
            &Body {
                b: 0.25,
                a: vec![1, 2],
            },
        );
        let name = r.file_name();
        assert!(name.starts_with("lr_law-") && name.ends_with(".json"));
        assert_eq!(name.len(), "lr_law-".len() + DIGEST_LEN + ".json".len());
        assert_eq!(r.value["kind"], "lr_law");
    }

    #[test]
    fn digest_depends_on_content_and_kind() {
        let a = Record::new(
            Kind::LrLaw,
            &Body {
                b: 0.25,
                a: vec![1],
            },
        );
        let b = Record::new(Kind::LrLaw, &Body { b: 0.5, a: vec![1] });
        let c = Record::new(
            Kind::QuadLog,
            &Body {
                b: 0.25,
                a: vec![1],
            },
        );
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(
            a.digest(),
            Record::new(
                Kind::LrLaw,
                &Body {
                    b: 0.25,
                    a: vec![1]
                }
            )
            .digest()
        );
    }

    #[test]
    fn rewrite_is_cached_and_load_checks_kind() {
        let dir = tempfile::tempdir().unwrap();
        let r = Record::new(Kind::Trace, &Body { b: 1.0, a: vec![] });
        let first = write(dir.path(), &r).unwrap();
        let again = write(dir.path(), &r).unwrap();
        assert!(!first.cached && again.cached);
        assert_eq!(first.path, again.path);
        let body: Body = load(&first.path, Kind::Trace).unwrap();
        assert_eq!(body, Body { b: 1.0, a: vec![] });
        assert!(matches!(
            load::<Body>(&first.path, Kind::LrLaw),
            Err(ArtifactError::KindMismatch { .. })
        ));
        assert!(matches!(
            read(&dir.path().join("nope.json")),
            Err(ArtifactError::NotFound(_))
        ));
    }

    #[test]
    fn kinds_round_trip_by_name() {
        for k in Kind::ALL {
            assert_eq!(Kind::from_name(k.name()), Some(k));
        }
    }
}
