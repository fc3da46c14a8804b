//! Label space, group-guided descriptions, the concept library and the text
//! embedding provider that stands in for a frozen text encoder.

mod embed;
mod labels;
pub mod llm;
pub mod prompts;

pub use embed::{
    encode_descriptions, sidecar_path, text_id, tokenize, write_embedding_file,
    EmbeddingProvider, Provenance, TextEncodingTable,
};
pub use labels::{Label, LabelSpace, Split};
pub use llm::{FixtureStore, HttpTransport, Layered, LlmTransport};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use prompts::{concept_prompt, desc_prompt, group_prompt, parse_answer};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("response is missing labels: {}", .0.join(", "))]
    MissingLabels(Vec<String>),
    #[error("malformed model response: {0}")]
    Response(String),
    #[error("transport error (retryable: {retryable}): {message}")]
    Transport { retryable: bool, message: String },
    #[error("no fixture response for prompt digest {0}")]
    FixtureMiss(String),
    #[error("no embedding for text id {0}")]
    Lookup(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl TextError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport { retryable: true, .. })
    }
}

/// Descriptions recommended to fall in this word range.
pub const DESCRIPTION_WORDS: std::ops::RangeInclusive<usize> = 50..=70;

/// Label groups and one description per label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionSet {
    pub groups: BTreeMap<String, Vec<usize>>,
    pub descriptions: BTreeMap<usize, String>,
}

impl DescriptionSet {
    /// Checks the set against a label space. Out-of-range description
    /// lengths only warn.
    pub fn validate(&self, labels: &LabelSpace) -> Result<(), TextError> {
        let mut seen: BTreeMap<usize, &str> = BTreeMap::new();
        for (gid, members) in &self.groups {
            for &m in members {
                if m == 0 || m >= labels.len() {
                    return Err(TextError::Schema(format!(
                        "group '{gid}' contains invalid anomaly index {m}"
                    )));
                }
                if let Some(prev) = seen.insert(m, gid) {
                    return Err(TextError::Schema(format!(
                        "label {m} appears in groups '{prev}' and '{gid}'"
                    )));
                }
            }
        }
        let ungrouped: Vec<String> = labels
            .anomalies()
            .filter(|l| !seen.contains_key(&l.index))
            .map(|l| l.name.clone())
            .collect();
        if !ungrouped.is_empty() {
            return Err(TextError::MissingLabels(ungrouped));
        }
        let undescribed: Vec<String> = labels
            .labels()
            .iter()
            .filter(|l| !self.descriptions.contains_key(&l.index))
            .map(|l| l.name.clone())
            .collect();
        if !undescribed.is_empty() {
            return Err(TextError::MissingLabels(undescribed));
        }
        if let Some(extra) = self.descriptions.keys().find(|&&k| k >= labels.len()) {
            return Err(TextError::Schema(format!("description for unknown index {extra}")));
        }
        for (i, d) in &self.descriptions {
            let words = d.split_whitespace().count();
            if !DESCRIPTION_WORDS.contains(&words) {
                log::warn!("description for label {i} has {words} words (expected 50-70)");
            }
        }
        Ok(())
    }

    /// Descriptions in label-index order.
    pub fn ordered(&self, labels: &LabelSpace) -> Result<Vec<String>, TextError> {
        labels
            .labels()
            .iter()
            .map(|l| {
                self.descriptions
                    .get(&l.index)
                    .cloned()
                    .ok_or_else(|| TextError::MissingLabels(vec![l.name.clone()]))
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TextError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let body = serde_json::to_string_pretty(self).expect("descriptions serialize");
        crate::dataio::write_atomic(path, body.as_bytes()).map_err(|e| TextError::io(path, e))
    }
}

fn names_of(labels: &LabelSpace, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| labels.labels()[i].name.clone()).collect()
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Queries grouping and per-group descriptions through `llm`.
///
/// The curated `group` ids in the label file are authoritative: the model's
/// grouping is validated and compared, and disagreements are logged.
/// Descriptions are requested once per curated group so that labels in the
/// same group are described together.
pub fn build_text_assets(
    labels: &LabelSpace,
    llm: &mut dyn LlmTransport,
) -> Result<DescriptionSet, TextError> {
    let anomaly_names: Vec<String> = labels.anomalies().map(|l| l.name.clone()).collect();
    let answer: prompts::GroupAnswer = parse_answer(&llm.complete(&group_prompt(&as_strs(&anomaly_names)))?)?;
    let mut proposed: BTreeMap<String, usize> = BTreeMap::new();
    for (gi, group) in answer.groups.iter().enumerate() {
        for name in group {
            let idx = labels
                .index_of(name)
                .filter(|&i| i > 0)
                .ok_or_else(|| TextError::Response(format!("grouping names unknown label '{name}'")))?;
            if proposed.insert(labels.labels()[idx].name.clone(), gi).is_some() {
                return Err(TextError::Response(format!("label '{name}' grouped twice")));
            }
        }
    }
    let missing: Vec<String> = anomaly_names
        .iter()
        .filter(|n| !proposed.contains_key(*n))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(TextError::MissingLabels(missing));
    }
    let curated = labels.groups();
    for members in curated.values() {
        let gids: BTreeSet<usize> = members
            .iter()
            .map(|&m| proposed[&labels.labels()[m].name])
            .collect();
        if gids.len() > 1 {
            log::warn!(
                "model grouping splits curated group {:?}; keeping the curated grouping",
                names_of(labels, members)
            );
        }
    }

    let mut descriptions = BTreeMap::new();
    let mut request = |idx: Vec<usize>| -> Result<(), TextError> {
        let names = names_of(labels, &idx);
        let answer: prompts::DescAnswer = parse_answer(&llm.complete(&desc_prompt(&as_strs(&names)))?)?;
        let missing: Vec<String> = names
            .iter()
            .filter(|n| !answer.descriptions.contains_key(*n))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(TextError::MissingLabels(missing));
        }
        for (i, n) in idx.iter().zip(&names) {
            descriptions.insert(*i, answer.descriptions[n].clone());
        }
        Ok(())
    };
    request(vec![0])?;
    for members in curated.values() {
        request(members.clone())?;
    }
    let set = DescriptionSet {
        groups: curated,
        descriptions,
    };
    set.validate(labels)?;
    Ok(set)
}

/// Default concept count: 200 for label spaces with at most six anomaly
/// labels, 500 otherwise.
pub fn default_concept_count(labels: &LabelSpace) -> usize {
    if labels.anomalies().count() <= 6 {
        200
    } else {
        500
    }
}

/// Embedded anomaly-relevant noun phrases.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptLibrary {
    pub nouns: Vec<String>,
    pub embeddings: Tensor<f32>,
    pub provenance: Vec<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct ConceptsFile {
    nouns: Vec<String>,
}

impl ConceptLibrary {
    /// Deduplicates (first occurrence wins, with a warning) and embeds `nouns`.
    pub fn from_nouns(nouns: Vec<String>, provider: &EmbeddingProvider) -> Result<Self, TextError> {
        let mut seen = BTreeSet::new();
        let mut unique = Vec::with_capacity(nouns.len());
        for n in nouns {
            let n = n.trim().to_owned();
            if n.is_empty() {
                continue;
            }
            if seen.insert(n.clone()) {
                unique.push(n);
            } else {
                log::warn!("duplicate concept noun '{n}' dropped");
            }
        }
        if unique.is_empty() {
            return Err(TextError::Validation("concept list is empty".into()));
        }
        let embeddings = provider.embed_all(&unique)?;
        Ok(Self {
            provenance: vec![provider.provenance(); unique.len()],
            nouns: unique,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }

    pub fn load_nouns(path: &Path) -> Result<Vec<String>, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
        let f: ConceptsFile =
            serde_json::from_str(&text).map_err(|e| TextError::Schema(format!("{}: {e}", path.display())))?;
        Ok(f.nouns)
    }

    pub fn save_nouns(&self, path: &Path) -> Result<(), TextError> {
        let body = serde_json::to_string_pretty(&ConceptsFile {
            nouns: self.nouns.clone(),
        })
        .expect("concepts serialize");
        crate::dataio::write_atomic(path, body.as_bytes()).map_err(|e| TextError::io(path, e))
    }

    pub fn ids(&self) -> Vec<String> {
        self.nouns.iter().map(|n| text_id(n)).collect()
    }
}

/// Requests `count` concept nouns for the anomaly labels and embeds them.
pub fn build_concept_library(
    labels: &LabelSpace,
    llm: &mut dyn LlmTransport,
    provider: &EmbeddingProvider,
    count: usize,
) -> Result<ConceptLibrary, TextError> {
    let names: Vec<String> = labels.anomalies().map(|l| l.name.clone()).collect();
    let answer: prompts::ConceptAnswer = parse_answer(&llm.complete(&concept_prompt(&as_strs(&names), count))?)?;
    if answer.nouns.is_empty() {
        return Err(TextError::Response("empty noun list".into()));
    }
    if answer.nouns.len() != count {
        log::warn!("requested {count} concept nouns, received {}", answer.nouns.len());
    }
    ConceptLibrary::from_nouns(answer.nouns, provider)
}
