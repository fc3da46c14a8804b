//! Prompt templates for grouping labels, describing groups and generating
//! concept nouns, plus tolerant parsing of the JSON answers.

use serde::de::DeserializeOwned;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::TextError;

const GROUP_TEMPLATE: &str = "Anomaly labels: {labels}.\nPartition these labels into groups of visually similar events. Two labels belong together when footage of them would show comparable motion, activity or setting.";

const DESC_TEMPLATE: &str = "Anomaly labels: {labels}.\nFor every label write one description of 50 to 70 words about what a camera would record. Start with the traits all listed labels share, then state what is particular to that label, naming concrete actions, motion and surroundings. Keep the same sentence layout across labels.";

const CONC_TEMPLATE: &str = "Anomaly labels: {labels}.\nList {L} short noun phrases naming objects, places or visual cues that tend to appear in footage of these events. The phrases will be embedded by an image-text encoder next to video features, so keep them concrete and visual.";

const GROUP_FORMAT: &str =
    "Respond only with JSON of the form {\"groups\": [[\"label\", ...], ...]}.";
const DESC_FORMAT: &str =
    "Respond only with JSON of the form {\"descriptions\": {\"label\": \"description\", ...}}.";
const CONC_FORMAT: &str = "Respond only with JSON of the form {\"nouns\": [\"phrase\", ...]}.";

fn join(labels: &[&str]) -> String {
    labels.join(", ")
}

pub fn group_prompt(labels: &[&str]) -> String {
    format!("{}\n{}", GROUP_TEMPLATE.replace("{labels}", &join(labels)), GROUP_FORMAT)
}

pub fn desc_prompt(labels: &[&str]) -> String {
    format!("{}\n{}", DESC_TEMPLATE.replace("{labels}", &join(labels)), DESC_FORMAT)
}

pub fn concept_prompt(labels: &[&str], count: usize) -> String {
    let body = CONC_TEMPLATE
        .replace("{labels}", &join(labels))
        .replace("{L}", &count.to_string());
    format!("{body}\n{CONC_FORMAT}")
}

/// Hex SHA-256 of a rendered prompt; the key for fixture replay.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Deserialize, serde::Serialize, PartialEq)]
pub struct GroupAnswer {
    pub groups: Vec<Vec<String>>,
}

#[derive(Debug, Deserialize, serde::Serialize, PartialEq)]
pub struct DescAnswer {
    pub descriptions: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Deserialize, serde::Serialize, PartialEq)]
pub struct ConceptAnswer {
    pub nouns: Vec<String>,
}

/// Parses the first JSON object in `text`, ignoring code fences or prose
/// around it.
pub fn parse_answer<T: DeserializeOwned>(text: &str) -> Result<T, TextError> {
    let start = text.find('{');
    let end = text.rfind('}');
    let body = match (start, end) {
        (Some(s), Some(e)) if e > s => &text[s..=e],
        _ => return Err(TextError::Response(format!("no JSON object in response: {text:.80}"))),
    };
    serde_json::from_str(body).map_err(|e| TextError::Response(e.to_string()))
}
