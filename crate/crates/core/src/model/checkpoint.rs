//! Checkpoint directories: `manifest.json` (config plus ordered tensor
//! descriptors) and `weights.bin` (little-endian f32 in manifest order).
//! Optimizer moments, when saved, go to `optim.bin` with the same layout:
//! all first moments, then all second moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::optim::AdamWState;

pub const CHECKPOINT_FORMAT: &str = "bilmforge-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorDescriptor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerRecord {
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerRecord>,
}

fn descriptors(params: &ModelParams<f32>) -> Vec<TensorDescriptor> {
    params
        .tensors()
        .into_iter()
        .map(|t| TensorDescriptor {
            name: t.name,
            shape: t.shape,
            dtype: "f32".into(),
        })
        .collect()
}

fn encode(params: &ModelParams<f32>, out: &mut Vec<u8>) {
    for t in params.tensors() {
        for x in t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn decode_into(params: &mut ModelParams<f32>, bytes: &[u8]) -> usize {
    let mut at = 0;
    for t in params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
            at += 4;
        }
    }
    at
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint directory, creating it if needed.
pub fn save_checkpoint(params: &ModelParams<f32>, optimizer: Option<&AdamWState<f32>>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    params.check_shapes()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        config: params.config.clone(),
        tensors: descriptors(params),
        optimizer: optimizer.map(|o| OptimizerRecord { step: o.step }),
    };
    write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    let mut bytes = Vec::with_capacity(4 * params.num_parameters());
    encode(params, &mut bytes);
    write(&dir.join("weights.bin"), &bytes)?;

    let optim_path = dir.join("optim.bin");
    match optimizer {
        Some(state) => {
            if state.m.tensors().iter().map(|t| &t.shape).ne(params.tensors().iter().map(|t| &t.shape)) {
                return Err(Error::Shape("optimizer moments do not match parameters".into()));
            }
            let mut bytes = Vec::with_capacity(8 * params.num_parameters());
            encode(&state.m, &mut bytes);
            encode(&state.v, &mut bytes);
            write(&optim_path, &bytes)?;
        }
        None if optim_path.exists() => fs::remove_file(&optim_path).map_err(|e| Error::io(&optim_path, e))?,
        None => {}
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown checkpoint format `{}`", manifest.format)));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

/// Parameter layout implied by a manifest, verified against its descriptors.
fn skeleton(manifest: &Manifest) -> Result<ModelParams<f32>> {
    let num_labels = manifest
        .tensors
        .iter()
        .find(|t| t.name == "classifier.bias")
        .and_then(|t| t.shape.first().copied());
    let global = manifest.tensors.iter().any(|t| t.name.contains("global_query"));
    let params = ModelParams::<f32>::skeleton(&manifest.config, num_labels, global);
    let expected = descriptors(&params);
    if expected != manifest.tensors {
        let detail = expected
            .iter()
            .zip(&manifest.tensors)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("{} descriptors, config implies {}", manifest.tensors.len(), expected.len()));
        return Err(Error::Shape(format!("manifest disagrees with its config: {detail}")));
    }
    Ok(params)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut params = skeleton(&manifest)?;
    let path = dir.join("weights.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = 4 * params.num_parameters();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, manifest needs {expected}",
            path.display(),
            bytes.len()
        )));
    }
    decode_into(&mut params, &bytes);
    Ok(params)
}

/// Loads a checkpoint and insists that it was written for `config`.
pub fn load_checkpoint_for(dir: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelParams<f32>> {
    let params = load_checkpoint(dir)?;
    if &params.config != config {
        return Err(Error::Shape(format!(
            "checkpoint config {:?} does not match requested {:?}",
            params.config, config
        )));
    }
    Ok(params)
}

/// Reads `optim.bin` if present. `params` supplies the layout.
pub fn load_optimizer_state(dir: impl AsRef<Path>, params: &ModelParams<f32>) -> Result<Option<AdamWState<f32>>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let Some(record) = manifest.optimizer else {
        return Ok(None);
    };
    let path = dir.join("optim.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let half = 4 * params.num_parameters();
    if bytes.len() != 2 * half {
        return Err(Error::Checkpoint(format!("{}: {} bytes, expected {}", path.display(), bytes.len(), 2 * half)));
    }
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    decode_into(&mut m, &bytes[..half]);
    decode_into(&mut v, &bytes[half..]);
    Ok(Some(AdamWState { step: record.step, m, v }))
}
