//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `EMOVOX01`, a little-endian `u64` manifest
//! length, a TOML manifest (format version, step, config snapshot, parameter
//! names and shapes, optimizer presence, payload CRC-32), then the payload:
//! every parameter as little-endian `f64` in manifest order, followed by the
//! Adam first and second moments in the same order when present.

use std::fs;
use std::path::Path;

use emovox_core::model::ModelConfig;
use emovox_core::training::{AdamState, Checkpoint, TrainConfig, CHECKPOINT_VERSION};
use emovox_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{ModelSection, TrainSection};
use crate::error::{CliError, IoContext, Result};
use crate::format::{f64_bytes, f64s_from};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMOVOX01";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    step: u64,
    payload_bytes: u64,
    crc32: u32,
    /// Adam step counter; absent when no optimizer state is stored.
    optimizer_step: Option<u64>,
    model: ModelSection,
    train: TrainSection,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for (_, t) in &ckpt.params {
        payload.extend(f64_bytes(t.data()));
    }
    if let Some(state) = &ckpt.optimizer {
        for t in state.m.iter().chain(&state.v) {
            payload.extend(f64_bytes(t.data()));
        }
    }
    let manifest = Manifest {
        format_version: ckpt.format_version,
        step: ckpt.step,
        payload_bytes: payload.len() as u64,
        crc32: crc32fast::hash(&payload),
        optimizer_step: ckpt.optimizer.as_ref().map(|s| s.step),
        model: ckpt.model_config.clone().into(),
        train: ckpt.train_config.clone().into(),
        params: ckpt
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + text.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let truncated = || CliError::data(path, "checkpoint is truncated");
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        if bytes.len() >= 6 && &bytes[..6] == b"EMOVOX" {
            return Err(CliError::Config(format!(
                "{}: unsupported checkpoint format `{}`",
                path.display(),
                String::from_utf8_lossy(&bytes[..bytes.len().min(8)])
            )));
        }
        return Err(CliError::data(path, "not an emovox checkpoint"));
    }
    let len_bytes: [u8; 8] = bytes.get(8..16).ok_or_else(truncated)?.try_into().expect("8 bytes");
    let manifest_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| truncated())?;
    let manifest_end = 16usize.checked_add(manifest_len).ok_or_else(truncated)?;
    let text = bytes.get(16..manifest_end).ok_or_else(truncated)?;
    let text = std::str::from_utf8(text).map_err(|_| CliError::data(path, "manifest is not valid UTF-8"))?;
    let manifest: Manifest =
        toml::from_str(text).map_err(|e| CliError::data(path, format!("bad manifest: {}", e.message())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(CliError::Config(format!(
            "{}: checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
            path.display(),
            manifest.format_version
        )));
    }
    let payload = &bytes[manifest_end..];
    if (payload.len() as u64) < manifest.payload_bytes {
        return Err(truncated());
    }
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(CliError::data(path, "trailing bytes after checkpoint payload"));
    }
    if crc32fast::hash(payload) != manifest.crc32 {
        return Err(CliError::data(path, "checkpoint payload checksum mismatch"));
    }

    let mut cursor = 0usize;
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let end = cursor + n * 8;
        let chunk = payload.get(cursor..end).ok_or_else(truncated)?;
        cursor = end;
        Tensor::new(shape.to_vec(), f64s_from(chunk)).map_err(|e| CliError::data(path, e.to_string()))
    };
    let mut params = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        params.push((p.name.clone(), take(&p.shape)?));
    }
    let optimizer = match manifest.optimizer_step {
        None => None,
        Some(step) => {
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for p in &manifest.params {
                m.push(take(&p.shape)?);
            }
            for p in &manifest.params {
                v.push(take(&p.shape)?);
            }
            Some(AdamState { step, m, v })
        }
    };
    if cursor != payload.len() {
        return Err(CliError::data(path, "payload length does not match the parameter shapes"));
    }
    Ok(Checkpoint {
        format_version: manifest.format_version,
        step: manifest.step,
        model_config: manifest.model.into(),
        train_config: manifest.train.into(),
        params,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, bytes).at(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).at(path)?, path)
}

/// Names of `TrainConfig` fields that differ. `total_steps` and
/// `checkpoint_every` may change between a run and its resumption.
pub fn train_config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<&'static str> {
    let mut out = Vec::new();
    let mut cmp = |name, same: bool| {
        if !same {
            out.push(name);
        }
    };
    cmp("alpha", a.alpha.to_bits() == b.alpha.to_bits());
    cmp("beta", a.beta.to_bits() == b.beta.to_bits());
    cmp("batch_size", a.batch_size == b.batch_size);
    cmp("learning_rate", a.learning_rate.to_bits() == b.learning_rate.to_bits());
    cmp("warmup_steps", a.warmup_steps == b.warmup_steps);
    cmp("seed", a.seed == b.seed);
    cmp("source_speaker_id", a.source_speaker_id == b.source_speaker_id);
    out
}

/// Rejects resuming `ckpt` under different model or training settings.
pub fn check_resume_compatible(ckpt: &Checkpoint, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    let mut fields: Vec<String> = ckpt
        .model_config
        .diff(model)
        .into_iter()
        .map(|f| format!("model.{f}"))
        .collect();
    fields.extend(
        train_config_diff(&ckpt.train_config, train)
            .into_iter()
            .map(|f| format!("train.{f}")),
    );
    if fields.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "checkpoint config differs from the run config in: {}",
            fields.join(", ")
        )))
    }
}
