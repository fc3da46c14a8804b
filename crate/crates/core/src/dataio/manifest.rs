//! JSON-lines manifests tying feature files to labels and frame annotations.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_feature_file, resolve, DataError, Result};
use crate::tensor::Tensor;
use crate::textbank::{LabelSpace, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowSplit {
    Train,
    Test,
}

/// One manifest line. `frame_gt` is a list of `[value, run_length]` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub video_id: String,
    pub feature_path: PathBuf,
    pub label_index: usize,
    pub split: RowSplit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_gt: Option<Vec<(u8, usize)>>,
}

pub fn encode_rle(mask: &[u8]) -> Vec<(u8, usize)> {
    let mut runs: Vec<(u8, usize)> = Vec::new();
    for &v in mask {
        match runs.last_mut() {
            Some((last, len)) if *last == v => *len += 1,
            _ => runs.push((v, 1)),
        }
    }
    runs
}

pub fn decode_rle(runs: &[(u8, usize)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for &(v, len) in runs {
        if v > 1 {
            return Err(DataError::Schema(format!("frame_gt value {v} is not 0 or 1")));
        }
        out.extend(std::iter::repeat_n(v, len));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: Tensor<f32>,
    pub label: usize,
    pub label_split: Split,
    pub frame_gt: Option<Vec<u8>>,
}

impl Video {
    pub fn is_anomalous(&self) -> bool {
        self.label != 0
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Video>,
    pub test: Vec<Video>,
    pub dim: usize,
}

impl Dataset {
    /// `(normal, anomalous)` counts of the training split.
    pub fn train_counts(&self) -> (usize, usize) {
        let a = self.train.iter().filter(|v| v.is_anomalous()).count();
        (self.train.len() - a, a)
    }
}

fn parse_rows(text: &str, origin: &Path) -> Result<Vec<ManifestRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| DataError::Schema(format!("{}:{}: {e}", origin.display(), i + 1)))
        })
        .collect()
}

fn check_row(row: &ManifestRow, labels: &LabelSpace) -> Result<Split> {
    let split = labels.split_of(row.label_index).ok_or_else(|| {
        DataError::Schema(format!(
            "video '{}': label index {} outside label space of {}",
            row.video_id,
            row.label_index,
            labels.len()
        ))
    })?;
    if row.split == RowSplit::Train && split == Split::Novel {
        return Err(DataError::Protocol(format!(
            "video '{}' has novel label '{}' but is in the training split",
            row.video_id,
            labels.labels()[row.label_index].name
        )));
    }
    Ok(split)
}

fn check_gt(row: &ManifestRow, n: usize) -> Result<Option<Vec<u8>>> {
    let Some(runs) = &row.frame_gt else {
        return Ok(None);
    };
    let mask = decode_rle(runs)?;
    if mask.len() != n {
        return Err(DataError::Validation(format!(
            "video '{}': frame_gt covers {} frames, features have {n}",
            row.video_id,
            mask.len()
        )));
    }
    let any = mask.contains(&1);
    if row.label_index == 0 && any {
        return Err(DataError::Validation(format!(
            "normal video '{}' has anomalous frames",
            row.video_id
        )));
    }
    if row.label_index != 0 && row.split == RowSplit::Train && !any {
        return Err(DataError::Validation(format!(
            "anomalous training video '{}' has no anomalous frame",
            row.video_id
        )));
    }
    Ok(Some(mask))
}

/// Loads and validates a manifest; relative feature paths resolve against `root`.
pub fn load_manifest(path: &Path, labels: &LabelSpace, root: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let rows = parse_rows(&text, path)?;
    let mut ids = BTreeSet::new();
    let mut splits = Vec::with_capacity(rows.len());
    for row in &rows {
        if !ids.insert(row.video_id.as_str()) {
            return Err(DataError::Schema(format!("duplicate video id '{}'", row.video_id)));
        }
        splits.push(check_row(row, labels)?);
    }
    let videos: Vec<(RowSplit, Video)> = rows
        .par_iter()
        .zip(splits.par_iter())
        .map(|(row, &label_split)| {
            let features = read_feature_file(&resolve(root, &row.feature_path))?;
            let frame_gt = check_gt(row, features.shape()[0])?;
            Ok((
                row.split,
                Video {
                    id: row.video_id.clone(),
                    features,
                    label: row.label_index,
                    label_split,
                    frame_gt,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut ds = Dataset::default();
    for (split, v) in videos {
        if v.is_empty() {
            return Err(DataError::Validation(format!("video '{}' has no frames", v.id)));
        }
        let d = v.features.shape()[1];
        if ds.dim == 0 {
            ds.dim = d;
        } else if d != ds.dim {
            return Err(DataError::Validation(format!(
                "video '{}' has dim {d}, expected {}",
                v.id, ds.dim
            )));
        }
        match split {
            RowSplit::Train => ds.train.push(v),
            RowSplit::Test => ds.test.push(v),
        }
    }
    Ok(ds)
}

/// Serializes rows as JSON lines.
pub fn manifest_to_string(rows: &[ManifestRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("manifest row serializes"));
        out.push('\n');
    }
    out
}
