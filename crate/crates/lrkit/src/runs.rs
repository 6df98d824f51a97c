//! JSONL run store: one `RunRecord` per line, append-only.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use lrkit_core::ingest::{IngestError, RunRecord};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunsError {
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: duplicate run_id `{run_id}` (first seen on line {first})")]
    Duplicate {
        line: usize,
        run_id: String,
        first: usize,
    },
    #[error("run_id `{run_id}` is already stored with different contents")]
    Conflict { run_id: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Best-effort field name for a serde_json message such as
/// "missing field `run_id` at line 1 column 20".
fn field_of(message: &str) -> String {
    for marker in ["field `", "variant `"] {
        if let Some(start) = message.find(marker) {
            let rest = &message[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    if message.contains("[tokens, loss]") || message.contains("tokens must") {
        return "samples".to_string();
    }
    "record".to_string()
}

fn strip_position(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message.to_string(),
    }
}

/// Parses and validates one record per non-blank line, keeping order.
pub fn parse_runs(text: &str) -> Result<Vec<RunRecord>, RunsError> {
    let mut runs = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let run: RunRecord = serde_json::from_str(raw).map_err(|e| {
            let message = e.to_string();
            RunsError::Malformed {
                line,
                field: field_of(&message),
                message: strip_position(&message),
            }
        })?;
        run.validate().map_err(|e| match e {
            IngestError::Invalid { field, reason } => RunsError::Malformed {
                line,
                field,
                message: reason,
            },
            other => RunsError::Malformed {
                line,
                field: "record".into(),
                message: other.to_string(),
            },
        })?;
        if let Some(first) = seen.insert(run.run_id.clone(), line) {
            return Err(RunsError::Duplicate {
                line,
                run_id: run.run_id,
                first,
            });
        }
        runs.push(run);
    }
    Ok(runs)
}

/// One compact JSON line per run.
pub fn to_jsonl(runs: &[RunRecord]) -> String {
    let mut out = String::new();
    for r in runs {
        out.push_str(&serde_json::to_string(r).expect("run records always serialize"));
        out.push('\n');
    }
    out
}

/// Outcome of an append.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppendSummary {
    pub added: usize,
    /// Records already stored byte-for-byte.
    pub unchanged: usize,
}

#[derive(Debug, Clone)]
pub struct RunStore {
    path: PathBuf,
}

impl RunStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All stored runs; a missing file is an empty store.
    pub fn load(&self) -> Result<Vec<RunRecord>, RunsError> {
        match fs::read_to_string(&self.path) {
            Ok(text) => parse_runs(&text),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(source) => Err(RunsError::Io {
                path: self.path.clone(),
                source,
            }),
        }
    }

    /// Appends runs not yet stored. Re-ingesting an identical record is a
    /// no-op; the same run_id with different contents is rejected and
    /// nothing is written.
    pub fn append(&self, runs: &[RunRecord]) -> Result<AppendSummary, RunsError> {
        let stored = self.load()?;
        let by_id: BTreeMap<&str, &RunRecord> =
            stored.iter().map(|r| (r.run_id.as_str(), r)).collect();
        let mut fresh = Vec::new();
        let mut summary = AppendSummary::default();
        let mut batch_ids = BTreeMap::new();
        for (i, r) in runs.iter().enumerate() {
            if let Some(first) = batch_ids.insert(r.run_id.as_str(), i + 1) {
                return Err(RunsError::Duplicate {
                    line: i + 1,
                    run_id: r.run_id.clone(),
                    first,
                });
            }
            match by_id.get(r.run_id.as_str()) {
                Some(old)
                    if to_jsonl(std::slice::from_ref(*old))
                        == to_jsonl(std::slice::from_ref(r)) =>
                {
                    summary.unchanged += 1
                }
                Some(_) => {
                    return Err(RunsError::Conflict {
                        run_id: r.run_id.clone(),
                    })
                }
                None => fresh.push(r.clone()),
            }
        }
        if !fresh.is_empty() {
            let io_err = |source| RunsError::Io {
                path: self.path.clone(),
                source,
            };
            if let Some(dir) = self.path.parent() {
                fs::create_dir_all(dir).map_err(io_err)?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(io_err)?;
            f.write_all(to_jsonl(&fresh).as_bytes()).map_err(io_err)?;
            summary.added = fresh.len();
        }
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"run_id":"r1","model":{"name":"m","total_params":10,"active_params":5,"hidden_size":4,"num_layers":2,"attn_heads":2,"kv_heads":1,"intermediate_size":8,"moe":true},"lr_global":0.001,"schedule":{"warmup_steps":10,"peak_lr":0.001,"decay_fraction":0.1,"decay_steps":0},"batch_tokens":1000,"samples":[[100,3.0],[200,2.5],[300,2.2]],"note":"kept"}"#;

    #[test]
    fn empty_stream() {
        assert!(parse_runs("").unwrap().is_empty());
        assert!(parse_runs("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn one_record_round_trips_with_unknown_fields() {
        let runs = parse_runs(LINE).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].samples.len(), 3);
        assert_eq!(runs[0].other_hparams["note"], "kept");
        assert_eq!(parse_runs(&to_jsonl(&runs)).unwrap(), runs);
    }

    #[test]
    fn negative_loss_names_loss() {
        let bad = LINE.replace("[200,2.5]", "[200,-1]");
        let err = parse_runs(&format!("\n{bad}")).unwrap_err();
        match err {
            RunsError::Malformed {
                line,
                field,
                message,
            } => {
                assert_eq!(line, 2);
                assert!(
                    field.contains("loss") || message.contains("loss"),
                    "{field}: {message}"
                );
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let bad = LINE.replace(r#""lr_global":0.001,"#, "");
        match parse_runs(&bad).unwrap_err() {
            RunsError::Malformed { field, .. } => assert_eq!(field, "lr_global"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = parse_runs(&format!("{LINE}\n{LINE}")).unwrap_err();
        assert!(matches!(
            err,
            RunsError::Duplicate {
                line: 2,
                first: 1,
                ..
            }
        ));
    }

    #[test]
    fn store_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path().join("runs.jsonl"));
        let runs = parse_runs(LINE).unwrap();
        assert_eq!(
            store.append(&runs).unwrap(),
            AppendSummary {
                added: 1,
                unchanged: 0
            }
        );
        assert_eq!(
            store.append(&runs).unwrap(),
            AppendSummary {
                added: 0,
                unchanged: 1
            }
        );
        let mut changed = runs.clone();
        changed[0].lr_global = 0.002;
        assert!(matches!(
            store.append(&changed),
            Err(RunsError::Conflict { .. })
        ));
        assert_eq!(store.load().unwrap(), runs);
    }
}
