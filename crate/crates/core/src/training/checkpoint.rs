//! Checkpoint directory: `manifest.json` lists every tensor (recommender,
//! sampler, then the Adam moments of each) with its shape, offset and SHA-256, and
//! `tensors.bin` holds their little-endian `f64` values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const BLOB: &str = "tensors.bin";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in elements into the blob.
    offset: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    config_hash: String,
    config: TrainConfig,
    num_items: usize,
    seed: u64,
    epoch: usize,
    adam_step: u64,
    sampler_adam_step: u64,
    blob: String,
    tensors: Vec<TensorEntry>,
}

/// SHA-256 of the compact JSON form of the configuration.
pub fn config_hash(config: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

fn le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Named views of every stored array, in manifest order.
fn arrays(state: &TrainState) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    for store in [state.srs.params(), state.sampler.params()] {
        for (name, t) in store.iter() {
            out.push((name.to_string(), t.shape().to_vec(), t.data()));
        }
    }
    let moments = [
        ("adam.m", state.srs.params(), &state.adam.m),
        ("adam.v", state.srs.params(), &state.adam.v),
        ("sampler_adam.m", state.sampler.params(), &state.sampler_adam.m),
        ("sampler_adam.v", state.sampler.params(), &state.sampler_adam.v),
    ];
    for (label, store, moments) in moments {
        for ((name, t), m) in store.iter().zip(moments) {
            out.push((format!("{label}/{name}"), t.shape().to_vec(), m.as_slice()));
        }
    }
    out
}

pub fn save_checkpoint(state: &TrainState, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in arrays(state) {
        let bytes = le_bytes(data);
        tensors.push(TensorEntry {
            name,
            shape,
            offset: blob.len() / 8,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        dtype: "f64-le".into(),
        config_hash: config_hash(&state.config),
        config: state.config.clone(),
        num_items: state.srs.num_items(),
        seed: state.config.seed,
        epoch: state.epoch,
        adam_step: state.adam.step,
        sampler_adam_step: state.sampler_adam.step,
        blob: BLOB.into(),
        tensors,
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))
}

/// Restores a checkpoint. With `expected`, a checkpoint written under a
/// different configuration is refused.
pub fn load_checkpoint(dir: impl AsRef<Path>, expected: Option<&TrainConfig>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::checkpoint("manifest", e.to_string()))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(
            "format_version",
            format!("found {}, this build reads {CHECKPOINT_VERSION}", manifest.format_version),
        ));
    }
    if manifest.dtype != "f64-le" {
        return Err(Error::checkpoint("dtype", format!("unsupported `{}`", manifest.dtype)));
    }
    let hash = config_hash(&manifest.config);
    if hash != manifest.config_hash {
        return Err(Error::checkpoint("config_hash", "does not match the stored config"));
    }
    if let Some(cfg) = expected {
        if config_hash(cfg) != hash {
            return Err(Error::checkpoint(
                "config_hash",
                "checkpoint was written under a different configuration",
            ));
        }
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    let mut state = TrainState::new(manifest.config.clone(), manifest.num_items)
        .map_err(|e| Error::checkpoint("config", e.to_string()))?;
    let layout = arrays(&state);
    if layout.len() != manifest.tensors.len() {
        return Err(Error::checkpoint(
            "tensors",
            format!("expected {} arrays, found {}", layout.len(), manifest.tensors.len()),
        ));
    }
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(layout.len());
    for ((name, shape, _), entry) in layout.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::checkpoint(
                &entry.name,
                format!("expected `{name}` with shape {shape:?}, found shape {:?}", entry.shape),
            ));
        }
        let len: usize = shape.iter().product();
        let bytes = blob
            .get(entry.offset * 8..(entry.offset + len) * 8)
            .ok_or_else(|| Error::checkpoint(&entry.name, "blob is truncated"))?;
        if hex::encode(Sha256::digest(bytes)) != entry.sha256 {
            return Err(Error::checkpoint(&entry.name, "contents do not match the recorded hash"));
        }
        values.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    let expected_len: usize = layout.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
    if blob.len() != expected_len * 8 {
        return Err(Error::checkpoint("blob", format!("{} bytes, expected {}", blob.len(), expected_len * 8)));
    }

    let mut it = values.into_iter();
    for store in [state.srs.params_mut(), state.sampler.params_mut()] {
        for t in store.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::new(shape, it.next().expect("layout checked"))?;
        }
    }
    for adam in [&mut state.adam, &mut state.sampler_adam] {
        for m in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            *m = it.next().expect("layout checked");
        }
    }
    state.adam.step = manifest.adam_step;
    state.sampler_adam.step = manifest.sampler_adam_step;
    state.epoch = manifest.epoch;
    Ok(state)
}
