//! Text embedding: a file-backed table or a seeded pseudo-encoder.
//!
//! The pseudo-encoder maps a text to the normalized sum of per-token
//! Gaussian vectors, each drawn from a generator seeded by a digest of
//! `(seed, token)`. Texts that share tokens therefore land close together,
//! which is enough structure to exercise group-guided encodings without a
//! pretrained model.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DescriptionSet, LabelSpace, TextError};
use crate::dataio;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    File,
    Pseudo,
    Client,
}

/// Stable identifier for a text, used as the key in embedding files.
pub fn text_id(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    Pseudo { dim: usize, seed: u64 },
    File { dim: usize, table: HashMap<String, Vec<f32>> },
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    ids: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

/// Writes an embedding matrix and its id sidecar.
pub fn write_embedding_file(path: &Path, ids: &[String], table: &Tensor<f32>) -> Result<(), TextError> {
    dataio::write_feature_file(path, table).map_err(|e| TextError::Data(e.to_string()))?;
    let side = serde_json::to_string_pretty(&Sidecar { ids: ids.to_vec() }).expect("ids serialize");
    let sp = sidecar_path(path);
    dataio::write_atomic(&sp, side.as_bytes()).map_err(|e| TextError::io(&sp, e))
}

impl EmbeddingProvider {
    pub fn pseudo(dim: usize, seed: u64) -> Self {
        Self::Pseudo { dim, seed }
    }

    /// Loads an embedding file plus its `.ids.json` sidecar.
    pub fn from_file(path: &Path) -> Result<Self, TextError> {
        let t = dataio::read_feature_file(path).map_err(|e| TextError::Data(e.to_string()))?;
        let (rows, dim) = t.dims2("embedding file").map_err(|e| TextError::Data(e.to_string()))?;
        let sp = sidecar_path(path);
        let side: Sidecar = serde_json::from_str(
            &std::fs::read_to_string(&sp).map_err(|e| TextError::io(&sp, e))?,
        )
        .map_err(|e| TextError::Schema(e.to_string()))?;
        if side.ids.len() != rows {
            return Err(TextError::Schema(format!(
                "{}: {} ids for {rows} rows",
                sp.display(),
                side.ids.len()
            )));
        }
        let table = side
            .ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, t.row(i).to_vec()))
            .collect();
        Ok(Self::File { dim, table })
    }

    /// Merges several embedding files into one lookup table.
    pub fn from_files(paths: &[PathBuf]) -> Result<Self, TextError> {
        let mut merged = HashMap::new();
        let mut dim = None;
        for p in paths {
            if let Self::File { dim: d, table } = Self::from_file(p)? {
                if dim.is_some_and(|x| x != d) {
                    return Err(TextError::Schema(format!("{}: dim {d} differs", p.display())));
                }
                dim = Some(d);
                merged.extend(table);
            }
        }
        Ok(Self::File {
            dim: dim.unwrap_or(0),
            table: merged,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Pseudo { dim, .. } | Self::File { dim, .. } => *dim,
        }
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            Self::Pseudo { .. } => Provenance::Pseudo,
            Self::File { .. } => Provenance::File,
        }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f32>, TextError> {
        match self {
            Self::Pseudo { dim, seed } => pseudo_embed(text, *dim, *seed),
            Self::File { table, .. } => {
                let id = text_id(text);
                table.get(&id).cloned().ok_or(TextError::Lookup(id))
            }
        }
    }

    pub fn embed_all<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor<f32>, TextError> {
        let rows = texts
            .iter()
            .map(|t| self.embed(t.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.dim()]));
        }
        Tensor::from_rows(&rows).map_err(|e| TextError::Data(e.to_string()))
    }
}

fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn pseudo_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>, TextError> {
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    for t in tokenize(text) {
        *counts.entry(t).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(TextError::Validation(format!("text has no tokens: '{text}'")));
    }
    let mut acc = vec![0.0f64; dim];
    for (tok, n) in &counts {
        for (a, v) in acc.iter_mut().zip(token_vector(tok, dim, seed)) {
            *a += f64::from(*n) * v;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= crate::tensor::NORM_FLOOR {
        return Err(TextError::Validation(format!("degenerate embedding for '{text}'")));
    }
    Ok(acc.iter().map(|v| (v / norm) as f32).collect())
}

/// Label-description encodings, row `i` for label index `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncodingTable {
    pub t_desc: Tensor<f32>,
    pub provenance: Vec<Provenance>,
}

pub fn encode_descriptions(
    labels: &LabelSpace,
    desc: &DescriptionSet,
    provider: &EmbeddingProvider,
) -> Result<TextEncodingTable, TextError> {
    let texts = desc.ordered(labels)?;
    let t_desc = provider.embed_all(&texts)?;
    for i in 0..t_desc.shape()[0] {
        let n: f32 = t_desc.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        if f64::from(n) <= crate::tensor::NORM_FLOOR {
            return Err(TextError::Validation(format!("description {i} encodes to a zero vector")));
        }
    }
    Ok(TextEncodingTable {
        provenance: vec![provider.provenance(); texts.len()],
        t_desc,
    })
}
