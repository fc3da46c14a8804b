//! JSON checkpoint container with base64 parameter payloads and a digest.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_atomic, DataError, Result};
use crate::model::{AnomizeModel, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "anomize-checkpoint";

/// Where training stood when the checkpoint was written.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    /// `init`, `stage1`, `stage2` or `joint`.
    pub stage: String,
    /// Completed epochs within the stage.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    config: ModelConfig,
    cursor: Cursor,
    params: Vec<StoredParam>,
    digest: String,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub cursor: Cursor,
    pub params: Vec<(String, Tensor<f32>)>,
}

fn digest(config: &ModelConfig, cursor: &Cursor, params: &[(String, Tensor<f32>)]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(serde_json::to_vec(cursor).expect("cursor serializes"));
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rank() as u64).to_le_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn from_model(model: &AnomizeModel<f32>, cursor: Cursor) -> Self {
        Self {
            config: model.config.clone(),
            cursor,
            params: model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Rebuilds the model. With `expected`, the stored configuration must
    /// agree on the feature dimension.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<AnomizeModel<f32>> {
        if let Some(e) = expected {
            if e.dim != self.config.dim {
                return Err(DataError::Migration(format!(
                    "checkpoint dim {} does not match configured dim {}",
                    self.config.dim, e.dim
                )));
            }
        }
        let mut model = AnomizeModel::<f32>::new(self.config.clone())
            .map_err(|e| DataError::Migration(e.to_string()))?;
        if model.params.len() != self.params.len() {
            return Err(DataError::Migration(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| DataError::Migration(format!("unknown parameter '{name}'")))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(DataError::Migration(format!(
                    "parameter '{name}' has shape {:?}, model expects {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        let container = Container {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            cursor: self.cursor.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| StoredParam {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: B64.encode(t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
                })
                .collect(),
            digest: digest(&self.config, &self.cursor, &self.params),
        };
        serde_json::to_string_pretty(&container).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| DataError::Corruption(format!("unparseable container: {e}")))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(DataError::Corruption("not a checkpoint container".into()));
        }
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(DataError::Migration(format!(
                    "checkpoint version {v}, this build reads version {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(DataError::Corruption("missing version".into())),
        }
        let c: Container =
            serde_json::from_value(raw).map_err(|e| DataError::Corruption(format!("malformed container: {e}")))?;
        let mut params = Vec::with_capacity(c.params.len());
        for p in c.params {
            let bytes = B64
                .decode(p.data.as_bytes())
                .map_err(|e| DataError::Corruption(format!("parameter '{}': {e}", p.name)))?;
            if bytes.len() % 4 != 0 {
                return Err(DataError::Corruption(format!("parameter '{}': ragged payload", p.name)));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(p.shape, data)
                .map_err(|e| DataError::Corruption(format!("parameter '{}': {e}", p.name)))?;
            params.push((p.name, t));
        }
        if digest(&c.config, &c.cursor, &params) != c.digest {
            return Err(DataError::Corruption("digest mismatch".into()));
        }
        Ok(Self {
            config: c.config,
            cursor: c.cursor,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, model: &AnomizeModel<f32>, cursor: Cursor) -> Result<()> {
    let body = Checkpoint::from_model(model, cursor).to_json();
    write_atomic(path, body.as_bytes()).map_err(|e| DataError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    Checkpoint::from_json(&text)
}
