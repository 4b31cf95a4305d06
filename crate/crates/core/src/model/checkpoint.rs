//! Binary checkpoint files: a JSON header line, a NUL byte, then raw
//! little-endian f64 payloads in manifest order.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::{Parameters, Tensor};
use crate::tokenizer::Vocabulary;

use super::config::{Direction, ModelConfig};
use super::optim::{LrSchedule, OptimizerState};
use super::transformer::TranslationModel;
use super::{ModelError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub direction: Direction,
    pub seed: u64,
    pub vocab: Arc<Vocabulary>,
    pub params: Parameters,
    pub optimizer: Option<OptimizerState>,
    pub step: usize,
    pub valid_ppl: Option<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &TranslationModel, optimizer: Option<OptimizerState>, step: usize, valid_ppl: Option<f64>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            direction: model.direction,
            seed: model.seed,
            vocab: Arc::clone(&model.vocab),
            params: model.params.clone(),
            optimizer,
            step,
            valid_ppl,
        }
    }

    pub fn to_model(&self) -> TranslationModel {
        TranslationModel {
            config: self.config.clone(),
            params: self.params.clone(),
            direction: self.direction,
            seed: self.seed,
            vocab: Arc::clone(&self.vocab),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: usize,
    base_lr: f64,
    warmup_steps: usize,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    schedule: LrSchedule,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    direction: Direction,
    seed: u64,
    vocab: Vocabulary,
    step: usize,
    valid_ppl: Option<f64>,
    optimizer: Option<OptimizerHeader>,
    manifest: Vec<ManifestEntry>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = ckpt.params.iter().map(|(n, t)| (format!("{PARAM}{n}"), t)).collect();
    if let Some(opt) = &ckpt.optimizer {
        tensors.extend(opt.m.iter().map(|(n, t)| (format!("{MOMENT1}{n}"), t)));
        tensors.extend(opt.v.iter().map(|(n, t)| (format!("{MOMENT2}{n}"), t)));
    }
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        direction: ckpt.direction,
        seed: ckpt.seed,
        vocab: (*ckpt.vocab).clone(),
        step: ckpt.step,
        valid_ppl: ckpt.valid_ppl.filter(|v| v.is_finite()),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            step: o.step,
            base_lr: o.base_lr,
            warmup_steps: o.warmup_steps,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            schedule: o.schedule,
        }),
        manifest,
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| ModelError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    bytes.extend_from_slice(b"\n\0");
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|err| ModelError::Io {
        path: path.to_path_buf(),
        err,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|err| ModelError::Io {
        path: path.to_path_buf(),
        err,
    })?;
    let format = |msg: String| ModelError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\0")
        .ok_or_else(|| format("missing header terminator".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[..split]).map_err(|e| format(e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| format("missing format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(ModelError::Version {
            path: path.to_path_buf(),
            found: found.try_into().unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| format(e.to_string()))?;
    let payload = &bytes[split + 2..];

    let mut params = Parameters::new();
    let mut m = Parameters::new();
    let mut v = Parameters::new();
    let mut expected_offset = 0;
    for entry in &header.manifest {
        let n: usize = entry.shape.iter().product();
        if entry.offset != expected_offset || entry.offset + 8 * n > payload.len() {
            return Err(format(format!("bad payload offset for {}", entry.name)));
        }
        let data = payload[entry.offset..entry.offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        expected_offset += 8 * n;
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| format(e.to_string()))?;
        if let Some(name) = entry.name.strip_prefix(PARAM) {
            params.insert(name, t);
        } else if let Some(name) = entry.name.strip_prefix(MOMENT1) {
            m.insert(name, t);
        } else if let Some(name) = entry.name.strip_prefix(MOMENT2) {
            v.insert(name, t);
        } else {
            return Err(format(format!("unknown tensor {}", entry.name)));
        }
    }
    if expected_offset != payload.len() {
        return Err(format(format!("payload has {} trailing bytes", payload.len() - expected_offset)));
    }
    let optimizer = header.optimizer.map(|o| OptimizerState {
        step: o.step,
        m,
        v,
        base_lr: o.base_lr,
        warmup_steps: o.warmup_steps,
        beta1: o.beta1,
        beta2: o.beta2,
        epsilon: o.epsilon,
        schedule: o.schedule,
    });
    Ok(Checkpoint {
        config: header.config,
        direction: header.direction,
        seed: header.seed,
        vocab: Arc::new(header.vocab),
        params,
        optimizer,
        step: header.step,
        valid_ppl: header.valid_ppl,
    })
}

/// Elementwise mean of the checkpoints' parameters.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Parameters> {
    let first = checkpoints.first().ok_or(ModelError::NoCheckpoints)?;
    let mut sum = first.params.clone();
    for c in &checkpoints[1..] {
        if !sum.same_layout(&c.params) {
            let name = c
                .params
                .names()
                .find(|n| sum.get(n).map(Tensor::shape) != c.params.get(n).map(Tensor::shape))
                .or_else(|| sum.names().find(|n| !c.params.contains(n)))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::ShapeMismatch(name));
        }
        sum.add_assign(&c.params)?;
    }
    sum.scale_inplace(1.0 / checkpoints.len() as f64);
    Ok(sum)
}
