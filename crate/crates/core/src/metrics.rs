//! Frame-level detection metrics and video-level categorization accuracy.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Video;
use crate::model::{AnomizeModel, ModelError, Phase, TextInputs};
use crate::tensor::descending_order;
use crate::textbank::Split;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricError::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::Input("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve via average ranks; tied scores count one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] != 0 {
                rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Mean precision at the rank of each positive, ranking by descending score
/// with ties kept in input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::Undefined("AP needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in descending_order(scores).iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / pos as f64)
}

/// Per-video evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub video_id: String,
    pub scores: Vec<f32>,
    pub frame_gt: Vec<u8>,
    pub predicted: usize,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFilter {
    All,
    Base,
    Novel,
}

impl SplitFilter {
    /// Whether an anomalous record of `split` is included.
    fn admits(self, split: Split) -> bool {
        match self {
            Self::All => split != Split::Normal,
            Self::Base => split == Split::Base,
            Self::Novel => split == Split::Novel,
        }
    }
}

/// Fraction of anomalous videos in the filtered set whose predicted label is correct.
pub fn top1_accuracy(records: &[EvalRecord], filter: SplitFilter) -> Result<f64> {
    let chosen: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.label != 0 && filter.admits(r.split))
        .collect();
    if chosen.is_empty() {
        return Err(MetricError::Undefined(format!("no anomalous {filter:?} videos")));
    }
    let hit = chosen.iter().filter(|r| r.predicted == r.label).count();
    Ok(hit as f64 / chosen.len() as f64)
}

/// A metric value, or the reason it is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Metric {
    fn from(r: Result<f64>) -> Self {
        match r {
            Ok(v) => Self {
                value: Some(v),
                reason: None,
            },
            Err(e) => Self {
                value: None,
                reason: Some(e.to_string()),
            },
        }
    }

    fn cell(&self) -> String {
        self.value.map_or_else(|| "-".to_owned(), |v| format!("{:.2}", 100.0 * v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: Metric,
    pub auc_b: Metric,
    pub auc_n: Metric,
    pub ap: Metric,
    pub ap_b: Metric,
    pub ap_n: Metric,
    pub acc: Metric,
    pub acc_b: Metric,
    pub acc_n: Metric,
    pub videos: usize,
    pub frames: usize,
}

fn pooled(records: &[EvalRecord], keep: impl Fn(Split) -> bool) -> (Vec<f64>, Vec<u8>) {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for r in records.iter().filter(|r| r.split == Split::Normal || keep(r.split)) {
        s.extend(r.scores.iter().map(|&v| f64::from(v)));
        l.extend_from_slice(&r.frame_gt);
    }
    (s, l)
}

/// Detection metrics pool frames of normal videos with those of the
/// anomalous videos in scope: all of them, base only, or novel only.
/// A pool with no anomalous video of its kind is undefined.
pub fn summarize(records: &[EvalRecord]) -> EvalReport {
    let pool = |keep: fn(Split) -> bool, name: &str| -> (Metric, Metric) {
        if !records.iter().any(|r| r.split != Split::Normal && keep(r.split)) {
            let m = Metric {
                value: None,
                reason: Some(format!("no {name} anomalous videos")),
            };
            return (m.clone(), m);
        }
        let (s, l) = pooled(records, keep);
        (Metric::from(roc_auc(&s, &l)), Metric::from(average_precision(&s, &l)))
    };
    let (auc, ap) = pool(|s| s != Split::Normal, "");
    let (auc_b, ap_b) = pool(|s| s == Split::Base, "base");
    let (auc_n, ap_n) = pool(|s| s == Split::Novel, "novel");
    EvalReport {
        auc,
        auc_b,
        auc_n,
        ap,
        ap_b,
        ap_n,
        acc: Metric::from(top1_accuracy(records, SplitFilter::All)),
        acc_b: Metric::from(top1_accuracy(records, SplitFilter::Base)),
        acc_n: Metric::from(top1_accuracy(records, SplitFilter::Novel)),
        videos: records.len(),
        frames: records.iter().map(|r| r.scores.len()).sum(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Column headers shared by [`EvalReport::row`].
    pub const COLUMNS: [&'static str; 9] = ["AUC", "AUC_b", "AUC_n", "AP", "AP_b", "AP_n", "ACC", "ACC_b", "ACC_n"];

    pub fn row(&self) -> [String; 9] {
        [
            &self.auc, &self.auc_b, &self.auc_n, &self.ap, &self.ap_b, &self.ap_n, &self.acc, &self.acc_b, &self.acc_n,
        ]
        .map(Metric::cell)
    }

    /// Aligned plain-text table, values in percent; undefined cells are `-`
    /// and their reasons are listed below the table.
    pub fn to_table(&self) -> String {
        let mut out = render_table(&[("", self)]);
        let named = [
            ("AUC", &self.auc),
            ("AUC_b", &self.auc_b),
            ("AUC_n", &self.auc_n),
            ("AP", &self.ap),
            ("AP_b", &self.ap_b),
            ("AP_n", &self.ap_n),
            ("ACC", &self.acc),
            ("ACC_b", &self.acc_b),
            ("ACC_n", &self.acc_n),
        ];
        for (name, m) in named {
            if let Some(r) = &m.reason {
                let _ = writeln!(out, "{name}: {r}");
            }
        }
        out
    }
}

/// Renders one row per named report under shared metric columns.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "run");
    for c in EvalReport::COLUMNS {
        let _ = write!(out, " {c:>7}");
    }
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for cell in r.row() {
            let _ = write!(out, " {cell:>7}");
        }
        out.push('\n');
    }
    out
}

/// Optional per-split replacements for the score-fusion weight.
///
/// The override is chosen by the video's annotated split, so it assumes the
/// category is known at test time. Normal videos always use the default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaOverrides {
    pub base: Option<f64>,
    pub novel: Option<f64>,
}

impl BetaOverrides {
    pub fn beta_for(&self, split: Split, default: f64) -> f64 {
        match split {
            Split::Base => self.base.unwrap_or(default),
            Split::Novel => self.novel.unwrap_or(default),
            Split::Normal => default,
        }
    }
}

/// Runs inference on every video (evaluation-phase fusion weight, full
/// length) and collects records in input order.
pub fn collect_records(
    model: &AnomizeModel<f32>,
    videos: &[Video],
    text: &TextInputs<f32>,
    beta: f64,
    overrides: &BetaOverrides,
) -> Result<Vec<EvalRecord>> {
    videos
        .par_iter()
        .map(|v| {
            let b = overrides.beta_for(v.label_split, beta);
            let out = model.infer(&v.features, text, Phase::Eval, b)?;
            let frame_gt = v.frame_gt.clone().ok_or_else(|| {
                MetricError::Input(format!("video '{}' has no frame annotations", v.id))
            })?;
            Ok(EvalRecord {
                video_id: v.id.clone(),
                scores: out.s,
                frame_gt,
                predicted: out.p_video,
                label: v.label,
                split: v.label_split,
            })
        })
        .collect()
}

pub fn evaluate(
    model: &AnomizeModel<f32>,
    videos: &[Video],
    text: &TextInputs<f32>,
    beta: f64,
    overrides: &BetaOverrides,
) -> Result<(EvalReport, Vec<EvalRecord>)> {
    let records = collect_records(model, videos, text, beta, overrides)?;
    Ok((summarize(&records), records))
}

/// Per-video CSV: id, label, split, prediction, frame count, top-M mean score.
pub fn records_to_csv(records: &[EvalRecord], top_m_divisor: usize) -> String {
    let mut out = String::from("video_id,label,split,predicted,frames,video_score\n");
    for r in records {
        let m = crate::model::top_m(r.scores.len(), top_m_divisor);
        let mut s = r.scores.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        let score = s[..m.min(s.len())].iter().map(|&v| f64::from(v)).sum::<f64>() / m as f64;
        let split = match r.split {
            Split::Normal => "normal",
            Split::Base => "base",
            Split::Novel => "novel",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            r.video_id,
            r.label,
            split,
            r.predicted,
            r.scores.len(),
            score
        );
    }
    out
}
