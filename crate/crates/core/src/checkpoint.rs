//! Versioned checkpoints: `manifest.json` plus `weights.bin`, a blob of
//! little-endian `f32` values concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SplitScheme, StandardScaler};
use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;
use crate::io::write_atomic;
use crate::model::{ModelConfig, Transformer};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the weights blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredAdjacency {
    pub nodes: Vec<String>,
    pub values: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub adjacency: Option<StoredAdjacency>,
    pub scaler: Option<StandardScaler>,
    pub column_names: Vec<String>,
    pub split: Option<SplitScheme>,
    #[serde(default)]
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Everything besides the weights that a checkpoint records.
#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub scaler: Option<StandardScaler>,
    pub column_names: Vec<String>,
    pub split: Option<SplitScheme>,
    pub seed: u64,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Transformer<f32>,
}

pub fn save(dir: &Path, model: &Transformer<f32>, meta: &CheckpointMeta) -> Result<Manifest> {
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    let mut tensors = Vec::new();
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: meta.config_hash.clone(),
        model: model.config.clone(),
        adjacency: model.adjacency().map(|a| StoredAdjacency {
            nodes: a.node_order().to_vec(),
            values: a.values().to_vec(),
        }),
        scaler: meta.scaler.clone(),
        column_names: meta.column_names.clone(),
        split: meta.split,
        seed: meta.seed,
        tensors,
    };
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(WEIGHTS), &blob)?;
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Loads a checkpoint; refuses a config-hash mismatch unless `force`.
pub fn load(dir: &Path, expected_hash: Option<&str>, force: bool) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if let Some(h) = expected_hash {
        if h != manifest.config_hash && !force {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs expected {h}",
                manifest.config_hash
            )));
        }
    }
    let blob = fs::read(dir.join(WEIGHTS))?;
    let adjacency = manifest
        .adjacency
        .as_ref()
        .map(|a| AdjacencyMatrix::from_values(a.nodes.clone(), a.values.clone()))
        .transpose()?;
    let mut model = Transformer::<f32>::new(manifest.model.clone(), adjacency, 0)?;
    if manifest.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", entry.name)))?;
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor `{}` has dtype {}", entry.name, entry.dtype)));
        }
        if model.params.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                model.params.get(id).shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let bytes = blob
            .get(entry.offset..entry.offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("weights blob too short for `{}`", entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *model.params.get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(Checkpoint { manifest, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Freq;

    fn model(use_kge: bool) -> Transformer<f32> {
        let cfg = ModelConfig {
            use_kge,
            ..ModelConfig::desk(12, 4, 4, 3, Freq::Hourly).with_dims(16, 2)
        };
        let names = ["a", "b", "c"].map(String::from).to_vec();
        let adj = AdjacencyMatrix::from_values(names, vec![0, 1, 1, 0, 0, 0, 1, 0, 0]).unwrap();
        Transformer::new(cfg, Some(adj), 11).unwrap()
    }

    fn meta(hash: &str) -> CheckpointMeta {
        CheckpointMeta {
            config_hash: hash.into(),
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for use_kge in [false, true] {
            let m = model(use_kge);
            let p = dir.path().join(format!("ck{use_kge}"));
            save(&p, &m, &meta("abc")).unwrap();
            let back = load(&p, Some("abc"), false).unwrap();
            assert_eq!(back.model.config, m.config);
            assert_eq!(back.model.adjacency(), m.adjacency());
            for ((na, a), (nb, b)) in m.params.iter().zip(back.model.params.iter()) {
                assert_eq!(na, nb);
                let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn hash_mismatch_refused_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model(true), &meta("abc")).unwrap();
        assert!(matches!(load(dir.path(), Some("xyz"), false), Err(Error::Checkpoint(_))));
        assert!(load(dir.path(), Some("xyz"), true).is_ok());
        assert!(load(dir.path(), None, false).is_ok());
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model(false), &meta("h")).unwrap();
        let w = dir.path().join(WEIGHTS);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load(dir.path(), None, false), Err(Error::Checkpoint(_))));
    }
}
