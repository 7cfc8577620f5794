//! Checkpoint archive: named parameter arrays, model config, permutation
//! vocabulary, optimizer state, and the training-run seed, in one JSON
//! file tagged `elfua-ckpt-v1`.
//!
//! Parameter data is base64 over little-endian f64 bytes, so save/load
//! round-trips are bit-exact and identical runs produce identical files.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::jigsaw::PermutationSet;
use crate::network::{ModelConfig, ModelState, Param};

pub const FORMAT_TAG: &str = "elfua-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerState {
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    perm_set: PermutationSet,
    adaptable: Vec<String>,
    params: Vec<ParamEntry>,
    optimizer: OptimizerState,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
}

fn encode_f64(data: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("parameter bytes not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write a checkpoint. The outer optimizer is stateless SGD, recorded as
/// such for format completeness.
pub fn save(
    state: &ModelState,
    train_config: Option<&TrainConfig>,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let params = state
        .params()
        .iter()
        .map(|(name, p)| ParamEntry {
            name: name.clone(),
            shape: p.shape.clone(),
            data: encode_f64(&p.data),
        })
        .collect();
    let file = CheckpointFile {
        format: FORMAT_TAG.to_string(),
        config: state.config.clone(),
        perm_set: state.perm_set.clone(),
        adaptable: state.adaptable_names().iter().cloned().collect(),
        params,
        optimizer: OptimizerState { kind: "sgd".into() },
        seed,
        train_config: train_config.cloned(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint written by [`save`].
pub fn load(path: impl AsRef<Path>) -> Result<(ModelState, Option<TrainConfig>, u64)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
    if file.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "unsupported format tag {:?}, expected {FORMAT_TAG:?}",
            file.format
        )));
    }
    let mut params = std::collections::BTreeMap::new();
    for entry in file.params {
        let data = decode_f64(&entry.data)?;
        if data.len() != entry.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "parameter {} length disagrees with its shape",
                entry.name
            )));
        }
        params.insert(
            entry.name,
            Param {
                shape: entry.shape,
                data,
            },
        );
    }
    let state = ModelState::from_parts(
        params,
        file.adaptable.into_iter().collect(),
        file.perm_set,
        file.config,
    )?;
    Ok((state, file.train_config, file.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model, ModelConfig};

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut cfg = ModelConfig::tiny();
        cfg.embed_hidden = 8;
        cfg.embed_out = 4;
        cfg.m = 3;
        cfg.image_size = 16;
        let state = init_model(&cfg, 9).unwrap();
        save(&state, None, 9, &path).unwrap();
        let (back, tc, seed) = load(&path).unwrap();
        assert_eq!(seed, 9);
        assert!(tc.is_none());
        assert_eq!(back.config, state.config);
        assert_eq!(back.perm_set, state.perm_set);
        for (name, p) in state.params() {
            let q = &back.params()[name];
            assert_eq!(p.shape, q.shape);
            let a: Vec<u64> = p.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "bits of {name} differ");
        }
        assert_eq!(back.adaptable_names(), state.adaptable_names());
    }

    #[test]
    fn rejects_unknown_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"format":"other"}"#).unwrap();
        assert!(load(&path).is_err());
    }
}
