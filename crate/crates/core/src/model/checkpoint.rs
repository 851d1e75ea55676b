//! Self-describing checkpoint files.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "VQACOIN\x01"
//! 8 bytes   header length H, little-endian u64
//! H bytes   UTF-8 JSON header (CheckpointHeader)
//! rest      f64 little-endian blob; every tensor entry points into it
//! ```
//!
//! The header carries the model config, vocabulary and answer set, so a
//! checkpoint alone is enough for inference. `blob_sha256` guards the blob.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, VqaCoin};
use crate::diffmath::Tensor;
use crate::textprep::{AnswerSet, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VQACOIN\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub answers: AnswerSet,
    pub tensors: Vec<TensorEntry>,
    /// Auxiliary tensors such as optimizer moments.
    pub extras: Vec<TensorEntry>,
    /// Free-form run metadata (epoch, optimizer step, best accuracy, ...).
    pub meta: serde_json::Value,
    pub blob_sha256: String,
}

/// A model plus whatever the trainer needs to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VqaCoin,
    pub extras: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: VqaCoin) -> Self {
        Self {
            model,
            extras: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut blob: Vec<f64> = Vec::with_capacity(self.model.params.scalar_count());
        let entry = |name: &str, t: &Tensor, blob: &mut Vec<f64>| {
            let e = TensorEntry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
                len: t.len(),
            };
            blob.extend_from_slice(t.data());
            e
        };
        let tensors = self
            .model
            .params
            .iter()
            .map(|(_, p)| entry(&p.name, &p.value, &mut blob))
            .collect();
        let extras = self.extras.iter().map(|(n, t)| entry(n, t, &mut blob)).collect();

        let mut blob_bytes = Vec::with_capacity(blob.len() * 8);
        for v in &blob {
            blob_bytes.extend_from_slice(&v.to_le_bytes());
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            answers: self.model.answers.clone(),
            tensors,
            extras,
            meta: self.meta.clone(),
            blob_sha256: sha256_hex(&blob_bytes),
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header_bytes.len() + blob_bytes.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&blob_bytes);
        Ok(out)
    }

    /// Parses a checkpoint. When `expected` is given, the stored config must equal it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, ModelError> {
        let header = read_header(bytes)?;
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("checked length")) as usize;
        let blob_bytes = &bytes[16 + header_len..];
        if !blob_bytes.len().is_multiple_of(8) {
            return Err(ModelError::Corrupt("blob length is not a multiple of 8".into()));
        }
        if sha256_hex(blob_bytes) != header.blob_sha256 {
            return Err(ModelError::Corrupt("blob checksum mismatch".into()));
        }
        if let Some(want) = expected {
            check_config(&header.config, want)?;
        }
        let blob: Vec<f64> = blob_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let slice = |e: &TensorEntry| -> Result<Tensor, ModelError> {
            let end = e.offset.checked_add(e.len).filter(|&end| end <= blob.len());
            let end = end.ok_or_else(|| ModelError::Corrupt(format!("tensor {} runs past the blob", e.name)))?;
            Tensor::new(e.shape.clone(), blob[e.offset..end].to_vec())
                .map_err(|err| ModelError::Corrupt(format!("tensor {}: {err}", e.name)))
        };

        let mut model = VqaCoin::new(&header.config, header.vocab.clone(), header.answers.clone(), 0)
            .map_err(|e| ModelError::Corrupt(format!("stored config: {e}")))?;
        if model.params.len() != header.tensors.len() {
            return Err(ModelError::Corrupt(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                header.tensors.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, e) in ids.into_iter().zip(&header.tensors) {
            if model.params.name(id) != e.name || model.params.get(id).shape() != e.shape.as_slice() {
                return Err(ModelError::Corrupt(format!(
                    "tensor {} {:?} does not match parameter {} {:?}",
                    e.name,
                    e.shape,
                    model.params.name(id),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = slice(e)?;
        }
        let extras = header
            .extras
            .iter()
            .map(|e| Ok((e.name.clone(), slice(e)?)))
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            model,
            extras,
            meta: header.meta,
        })
    }
}

/// Reads and validates only the JSON header.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader, ModelError> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("missing checkpoint magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| ModelError::Corrupt("header length exceeds file size".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| ModelError::Corrupt(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ModelError::Corrupt(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok(header)
}

fn check_config(stored: &ModelConfig, want: &ModelConfig) -> Result<(), ModelError> {
    // answer_count 0 in the expectation means "whatever the checkpoint has"
    let mut want = want.clone();
    if want.answer_count == 0 {
        want.answer_count = stored.answer_count;
    }
    if *stored != want {
        let a = serde_json::to_value(stored).unwrap_or_default();
        let b = serde_json::to_value(&want).unwrap_or_default();
        let diffs: Vec<String> = match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(v))
                .map(|(k, v)| format!("{k}: stored {v}, expected {}", b.get(k).cloned().unwrap_or_default()))
                .collect(),
            _ => vec![],
        };
        return Err(ModelError::ConfigMismatch(diffs.join("; ")));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes, expected)
}
