//! Checkpoint directory: `index.json` describing every tensor and
//! `tensors.bin` holding their little-endian f32 values back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stcat_tensor::{AdamState, ParamStore, Tensor};

use crate::config::ModelConfig;
use crate::error::{Result, StcatError};
use crate::model::Stcat;

pub const INDEX: &str = "index.json";
pub const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub step: usize,
    pub adam_step: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: AdamState<f32>,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| StcatError::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>| {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() - offset,
            });
        };
        for (_, name, t) in self.params.iter() {
            push(name.to_owned(), t);
        }
        let names: Vec<_> = self.params.iter().map(|(_, n, _)| n.to_owned()).collect();
        for (name, m) in names.iter().zip(&self.optimizer.m) {
            push(format!("{M_PREFIX}{name}"), m);
        }
        for (name, v) in names.iter().zip(&self.optimizer.v) {
            push(format!("{V_PREFIX}{name}"), v);
        }
        let index = CheckpointIndex {
            step: self.step,
            adam_step: self.optimizer.step,
            config: self.config.clone(),
            tensors,
        };
        let blob_path = dir.join(BLOB);
        fs::write(&blob_path, &blob).map_err(|e| StcatError::io(&blob_path, e))?;
        let index_path = dir.join(INDEX);
        let json = serde_json::to_string_pretty(&index).map_err(|e| StcatError::format(&index_path, e.to_string()))?;
        fs::write(&index_path, json).map_err(|e| StcatError::io(&index_path, e))
    }

    /// Loads and validates a checkpoint against a model built from its own
    /// config; returns the model as well.
    pub fn load(dir: &Path) -> Result<(Stcat, Self)> {
        let index_path = dir.join(INDEX);
        let text = fs::read_to_string(&index_path).map_err(|e| StcatError::io(&index_path, e))?;
        let index: CheckpointIndex =
            serde_json::from_str(&text).map_err(|e| StcatError::format(&index_path, e.to_string()))?;
        Self::from_index(dir, index)
    }

    /// Like [`Checkpoint::load`], but requires the stored config to equal `expected`
    /// in every architectural field.
    pub fn load_for(dir: &Path, expected: &ModelConfig) -> Result<(Stcat, Self)> {
        let (model, ckpt) = Self::load(dir)?;
        let c = &ckpt.config;
        let mut bad = Vec::new();
        for (name, a, b) in [
            ("frames", c.frames, expected.frames),
            ("height", c.height, expected.height),
            ("width", c.width, expected.width),
            ("patch", c.patch, expected.patch),
            ("channels", c.channels, expected.channels),
            ("depth", c.depth, expected.depth),
            ("heads", c.heads, expected.heads),
            ("ffn_dim", c.ffn_dim, expected.ffn_dim),
            ("vocab_size", c.vocab_size, expected.vocab_size),
        ] {
            if a != b {
                bad.push(format!("{name} {a} != {b}"));
            }
        }
        if !bad.is_empty() {
            return Err(StcatError::format(
                dir.join(INDEX),
                format!("config mismatch: {}", bad.join(", ")),
            ));
        }
        Ok((model, ckpt))
    }

    fn from_index(dir: &Path, index: CheckpointIndex) -> Result<(Stcat, Self)> {
        let index_path = dir.join(INDEX);
        let blob_path = dir.join(BLOB);
        let blob = fs::read(&blob_path).map_err(|e| StcatError::io(&blob_path, e))?;
        let (model, mut params) = Stcat::new::<f32>(&index.config)?;
        let expected_len: usize = index.tensors.iter().map(|t| t.length).sum();
        if blob.len() != expected_len {
            return Err(StcatError::format(
                &blob_path,
                format!("expected {expected_len} bytes, found {}", blob.len()),
            ));
        }
        let read = |entry: &TensorEntry| -> Result<Tensor<f32>> {
            let numel: usize = entry.shape.iter().product();
            let end = entry.offset.checked_add(entry.length);
            if entry.length != numel * 4 || end.map_or(true, |e| e > blob.len()) {
                return Err(StcatError::format(
                    &index_path,
                    format!(
                        "tensor {} at offset {} with {} bytes does not fit shape {:?} in a {}-byte blob",
                        entry.name,
                        entry.offset,
                        entry.length,
                        entry.shape,
                        blob.len()
                    ),
                ));
            }
            let data = blob[entry.offset..entry.offset + entry.length]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Tensor::new(entry.shape.clone(), data)?)
        };
        let find = |name: &str| index.tensors.iter().find(|t| t.name == name);
        let ids: Vec<_> = params
            .iter()
            .map(|(id, n, t)| (id, n.to_owned(), t.shape().to_vec()))
            .collect();
        let mut m = Vec::with_capacity(ids.len());
        let mut v = Vec::with_capacity(ids.len());
        for (id, name, shape) in &ids {
            let entry = find(name).ok_or_else(|| StcatError::format(&index_path, format!("missing tensor {name}")))?;
            if &entry.shape != shape {
                return Err(StcatError::format(
                    &index_path,
                    format!("tensor {name} has shape {:?}, model expects {shape:?}", entry.shape),
                ));
            }
            params.set(*id, read(entry)?)?;
            for (prefix, out) in [(M_PREFIX, &mut m), (V_PREFIX, &mut v)] {
                let key = format!("{prefix}{name}");
                let t = match find(&key) {
                    Some(e) if &e.shape == shape => read(e)?,
                    Some(e) => {
                        return Err(StcatError::format(
                            &index_path,
                            format!("tensor {key} has shape {:?}, expected {shape:?}", e.shape),
                        ))
                    }
                    None => return Err(StcatError::format(&index_path, format!("missing tensor {key}"))),
                };
                out.push(t);
            }
        }
        if index.tensors.len() != 3 * ids.len() {
            return Err(StcatError::format(
                &index_path,
                format!("{} tensors listed, model has {}", index.tensors.len(), 3 * ids.len()),
            ));
        }
        let ckpt = Checkpoint {
            step: index.step,
            config: index.config,
            params,
            optimizer: AdamState {
                step: index.adam_step,
                m,
                v,
            },
        };
        Ok((model, ckpt))
    }
}
