//! Model shapes by preset name or JSON file.

use std::fs;
use std::path::Path;

use lrkit_core::ingest::ModelShape;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("`{0}` is neither a shape file nor a preset (try one of: {1})")]
    Unknown(String, String),
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
}

fn preset_table() -> Vec<(&'static str, ModelShape)> {
    let s = ModelShape::new;
    vec![
        (
            "0.5b",
            s(
                "qwen3-moe-0.5b-a0.1b",
                550_000_000,
                100_000_000,
                256,
                3,
                32,
                4,
                768,
                true,
            ),
        ),
        (
            "1b",
            s(
                "qwen3-moe-1b-a0.2b",
                1_000_000_000,
                190_000_000,
                384,
                9,
                32,
                4,
                768,
                true,
            ),
        ),
        (
            "2b",
            s(
                "qwen3-moe-2b-a0.3b",
                2_000_000_000,
                280_000_000,
                512,
                12,
                32,
                4,
                768,
                true,
            ),
        ),
        (
            "3b",
            s(
                "qwen3-moe-3b-a0.4b",
                3_000_000_000,
                400_000_000,
                640,
                15,
                32,
                4,
                768,
                true,
            ),
        ),
        (
            "4b",
            s(
                "qwen3-moe-4b-a0.5b",
                4_000_000_000,
                530_000_000,
                768,
                18,
                32,
                4,
                768,
                true,
            ),
        ),
        (
            "12b",
            s(
                "qwen3-moe-12b-a1.3b",
                12_000_000_000,
                1_300_000_000,
                1280,
                30,
                32,
                4,
                768,
                true,
            ),
        ),
        (
            "2b-proxy",
            s(
                "qwen3-moe-2b-a0.3b-proxy",
                2_000_000_000,
                290_000_000,
                640,
                18,
                32,
                4,
                384,
                true,
            ),
        ),
        (
            "2b-proxy-512",
            s(
                "qwen3-moe-2b-a0.3b-proxy-512",
                2_000_000_000,
                290_000_000,
                512,
                18,
                32,
                4,
                512,
                true,
            ),
        ),
    ]
}

pub fn preset_names() -> Vec<&'static str> {
    preset_table().into_iter().map(|(n, _)| n).collect()
}

pub fn preset(name: &str) -> Option<ModelShape> {
    preset_table()
        .into_iter()
        .find(|(n, s)| *n == name || s.name == name)
        .map(|(_, s)| s)
}

/// A JSON file (with or without `.json`), else a preset matched by the
/// reference's file stem, so `shapes/12b` finds the `12b` preset.
pub fn resolve_shape(reference: &str) -> Result<ModelShape, ShapeError> {
    for candidate in [reference.to_string(), format!("{reference}.json")] {
        let path = Path::new(&candidate);
        if path.is_file() {
            let text = fs::read_to_string(path).map_err(|e| ShapeError::Malformed {
                path: candidate.clone(),
                message: e.to_string(),
            })?;
            let shape: ModelShape =
                serde_json::from_str(&text).map_err(|e| ShapeError::Malformed {
                    path: candidate.clone(),
                    message: e.to_string(),
                })?;
            shape.validate().map_err(|e| ShapeError::Malformed {
                path: candidate.clone(),
                message: e.to_string(),
            })?;
            return Ok(shape);
        }
    }
    let stem = Path::new(reference)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(reference);
    preset(stem).ok_or_else(|| ShapeError::Unknown(reference.into(), preset_names().join(", ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for (_, s) in preset_table() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn directory_style_reference_finds_preset() {
        let p = resolve_shape("shapes/2b-proxy").unwrap();
        assert_eq!((p.hidden_size, p.num_layers), (640, 18));
        let t = resolve_shape("shapes/12b").unwrap();
        assert_eq!((t.hidden_size, t.num_layers), (1280, 30));
        assert!(resolve_shape("shapes/99b").is_err());
    }

    #[test]
    fn reads_shape_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.json");
        fs::write(
            &path,
            serde_json::to_string(&preset("4b").unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(
            resolve_shape(path.to_str().unwrap()).unwrap().hidden_size,
            768
        );
        let stemless = dir.path().join("tiny");
        assert_eq!(
            resolve_shape(stemless.to_str().unwrap())
                .unwrap()
                .num_layers,
            18
        );
    }
}
