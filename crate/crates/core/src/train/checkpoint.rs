use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::nn::HostTensor;

/// Loss values of one epoch; epoch 0 holds the losses before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: BTreeMap<String, HostTensor>,
    pub optimizers: BTreeMap<String, OptimizerState>,
}

impl Checkpoint {
    /// Loss histories without timing, for comparing runs.
    pub fn loss_history(&self) -> Vec<BTreeMap<String, f64>> {
        self.history.iter().map(|r| r.losses.clone()).collect()
    }

    /// Warns on a config mismatch and refuses unless `force`.
    pub fn verify_config(&self, expected: &TrainConfig, force: bool) -> Result<()> {
        let hash = expected.hash();
        if hash == self.config_hash {
            return Ok(());
        }
        log::warn!("checkpoint config hash {} differs from {hash}", self.config_hash);
        if force {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "checkpoint was written with config {} but the current config hashes to {hash}; pass --force to load anyway",
                self.config_hash
            )))
        }
    }
}

const MANIFEST: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";
const OPTIM_FILE: &str = "optimizer.bin";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    kind: String,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    stage: Stage,
    config_hash: String,
    epoch: usize,
    config: serde_json::Value,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
    optimizers: BTreeMap<String, OptimizerEntry>,
}

fn pack<'a>(
    tensors: impl Iterator<Item = (String, &'a HostTensor)>,
    file: &str,
    bytes: &mut Vec<u8>,
) -> Vec<TensorEntry> {
    tensors
        .map(|(name, t)| {
            let offset = bytes.len() as u64;
            bytes.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
            TensorEntry {
                name,
                shape: t.shape.clone(),
                dtype: "f32".into(),
                file: file.into(),
                byte_offset: offset,
                byte_len: bytes.len() as u64 - offset,
            }
        })
        .collect()
}

/// Writes `manifest.json`, `params.bin` and `optimizer.bin` into `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut param_bytes = Vec::new();
    let tensors = pack(ckpt.params.iter().map(|(n, t)| (n.clone(), t)), PARAMS_FILE, &mut param_bytes);
    let mut optim_bytes = Vec::new();
    let optimizers = ckpt
        .optimizers
        .iter()
        .map(|(key, state)| {
            let entries = pack(state.tensors.iter().map(|(n, t)| (format!("{key}/{n}"), t)), OPTIM_FILE, &mut optim_bytes);
            (key.clone(), OptimizerEntry { kind: state.kind.clone(), step: state.step, tensors: entries })
        })
        .collect();
    let manifest = Manifest {
        format: 1,
        stage: ckpt.stage,
        config_hash: ckpt.config_hash.clone(),
        epoch: ckpt.epoch,
        config: ckpt.config.to_json(),
        history: ckpt.history.clone(),
        tensors,
        optimizers,
    };
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write(PARAMS_FILE, &param_bytes)?;
    write(OPTIM_FILE, &optim_bytes)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
    // the manifest goes last so a partially written directory never parses
    write(MANIFEST, text.as_bytes())
}

fn unpack(
    entries: &[TensorEntry],
    files: &BTreeMap<&str, Vec<u8>>,
    strip: &str,
    problems: &mut Vec<String>,
) -> BTreeMap<String, HostTensor> {
    let mut out = BTreeMap::new();
    for e in entries {
        let Some(bytes) = files.get(e.file.as_str()) else {
            problems.push(format!("tensor `{}` refers to unknown file `{}`", e.name, e.file));
            continue;
        };
        let numel: usize = e.shape.iter().product();
        if e.dtype != "f32" || e.byte_len != 4 * numel as u64 {
            problems.push(format!("tensor `{}`: {} bytes of {} for shape {:?}", e.name, e.byte_len, e.dtype, e.shape));
            continue;
        }
        let end = e.byte_offset + e.byte_len;
        if end > bytes.len() as u64 {
            problems.push(format!(
                "tensor `{}` is truncated: needs bytes {}..{end} of {}, which has {}",
                e.name,
                e.byte_offset,
                e.file,
                bytes.len()
            ));
            continue;
        }
        let raw = &bytes[e.byte_offset as usize..end as usize];
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let name = e.name.strip_prefix(strip).unwrap_or(&e.name).to_string();
        out.insert(name, HostTensor { shape: e.shape.clone(), data });
    }
    out
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    let mut files = BTreeMap::new();
    for name in [PARAMS_FILE, OPTIM_FILE] {
        let path = dir.join(name);
        files.insert(name, fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    let mut problems = Vec::new();
    let params = unpack(&manifest.tensors, &files, "", &mut problems);
    let optimizers = manifest
        .optimizers
        .iter()
        .map(|(key, o)| {
            let tensors = unpack(&o.tensors, &files, &format!("{key}/"), &mut problems);
            (key.clone(), OptimizerState { kind: o.kind.clone(), step: o.step, tensors })
        })
        .collect();
    let config = match TrainConfig::from_json(manifest.config) {
        Ok(c) => Some(c),
        Err(e) => {
            problems.push(format!("stored config: {e}"));
            None
        }
    };
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems));
    }
    Ok(Checkpoint {
        stage: manifest.stage,
        config: config.expect("checked above"),
        config_hash: manifest.config_hash,
        epoch: manifest.epoch,
        history: manifest.history,
        params,
        optimizers,
    })
}
