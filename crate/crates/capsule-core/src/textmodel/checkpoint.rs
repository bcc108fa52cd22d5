//! Checkpoint serialization.
//!
//! Self-describing JSON container with a mandatory format version, the model
//! config, the vocabulary, and every named weight matrix. f64 values survive
//! the round trip bit-exactly (serde_json emits shortest-round-trip floats),
//! and `BTreeMap` keying makes the byte stream deterministic.

use super::{Mat, ModelConfig, ModelParams, Vocabulary};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    frozen: bool,
    vocab: Vocabulary,
    weights: BTreeMap<String, Mat>,
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        frozen: params.frozen,
        vocab: params.vocab.clone(),
        weights: params.weights.clone(),
    };
    let bytes = serde_json::to_vec(&file)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: file.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut vocab = file.vocab;
    vocab.rebuild_index();
    Ok(ModelParams {
        config: file.config,
        vocab,
        weights: file.weights,
        frozen: file.frozen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmodel::ModelConfig;

    fn params() -> ModelParams {
        let vocab = Vocabulary::from_words(&["one", "two", "three"]);
        ModelParams::init(
            ModelConfig {
                n_layers: 1,
                d_model: 4,
                n_heads: 2,
                context_window: 8,
                seed: 42,
            },
            vocab,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let p = params();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p.weights_fingerprint(), q.weights_fingerprint());
        assert_eq!(p.config, q.config);
        assert_eq!(p.frozen, q.frozen);
        // tokenizer still works after the index rebuild
        assert_eq!(q.vocab.tokenize("two three").len(), 2);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let p = params();
        save_checkpoint(&p, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace("\"format_version\":1", "\"format_version\":99");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint("/nonexistent/nowhere.ckpt.json"),
            Err(Error::Io { .. })
        ));
    }
}
