//! Checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! b"CISSCKPT" | u32 version | u64 header_len | header JSON | f64 tensor data
//! ```
//!
//! The header lists every parameter tensor by name with its element offset
//! and length into the data section, plus the step, class list and a hash of
//! the model config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Conv3x3;
use super::{ModelConfig, ModelSnapshot, Params, SegModel};
use crate::error::{Error, Result};
use crate::tensor::ClassId;

const MAGIC: &[u8; 8] = b"CISSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub step: usize,
    pub classes: Vec<ClassId>,
    pub step_of_class: BTreeMap<ClassId, usize>,
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form payload, e.g. the experiment config that produced the model.
    #[serde(default)]
    pub extra: Option<serde_json::Value>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &SegModel,
    step: usize,
    extra: Option<serde_json::Value>,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, values) in model.params.named() {
        tensors.push(TensorEntry {
            name,
            offset,
            len: values.len(),
        });
        offset += values.len();
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        step,
        classes: model.classes(),
        step_of_class: model.step_of_class.clone(),
        config_hash: model.config.hash(),
        model_config: model.config.clone(),
        tensors,
        extra,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + header_bytes.len() + data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&data);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SegModel, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: String| Error::load(path, why);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| bad(format!("bad header: {e}")))?;
    if header.config_hash != header.model_config.hash() {
        return Err(bad("config hash mismatch".into()));
    }
    let data = &bytes[data_start..];
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if data.len() != total * 8 {
        return Err(bad(format!(
            "expected {} data bytes, found {}",
            total * 8,
            data.len()
        )));
    }
    let read = |entry: &TensorEntry| -> Vec<f64> {
        data[entry.offset * 8..(entry.offset + entry.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let by_name: BTreeMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    let get = |name: &str| -> Result<Vec<f64>> {
        by_name
            .get(name)
            .map(|e| read(e))
            .ok_or_else(|| Error::load(path, format!("missing tensor {name}")))
    };

    let cfg = &header.model_config;
    let widths = [3, cfg.hidden[0], cfg.hidden[1], cfg.feature_dim];
    let mut convs = Vec::with_capacity(3);
    for i in 0..3 {
        let weight = get(&format!("extractor.conv{}.weight", i + 1))?;
        let bias = get(&format!("extractor.conv{}.bias", i + 1))?;
        if weight.len() != 9 * widths[i] * widths[i + 1] || bias.len() != widths[i + 1] {
            return Err(bad(format!("conv{} has the wrong shape", i + 1)));
        }
        convs.push(Conv3x3 {
            cin: widths[i],
            cout: widths[i + 1],
            weight,
            bias,
        });
    }
    let score_w = get("scorers.weight")?;
    let score_b = get("scorers.bias")?;
    if score_b.len() != header.classes.len() || score_w.len() != score_b.len() * cfg.feature_dim {
        return Err(bad("scorer shape disagrees with class list".into()));
    }
    let convs: [Conv3x3; 3] = convs.try_into().expect("three convs");
    let model = SegModel {
        config: cfg.clone(),
        params: Params {
            convs,
            score_w,
            score_b,
        },
        step_of_class: header.step_of_class.clone(),
    };
    Ok((model, header))
}

pub fn load_snapshot(path: &Path) -> Result<ModelSnapshot> {
    Ok(ModelSnapshot::from_model(load_checkpoint(path)?.0))
}
