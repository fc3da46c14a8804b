//! Objectives, the optimizer, and the staged training protocol.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{save_checkpoint, Cursor, DataError, Video};
use crate::model::{
    retrieve_concepts, subsample_frames, top_m, AnomizeModel, ConceptSelection, ModelError, Phase,
    StreamMode, TextInputs, TEMPORAL_PREFIX,
};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss in {stage} epoch {epoch} batch {batch}; parameter norms: {norms}")]
    NonFinite {
        stage: String,
        epoch: usize,
        batch: usize,
        norms: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Lower clamp for every logarithm argument.
    pub eps_log: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 32,
            epochs_stage1: 16,
            epochs_stage2: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            eps_log: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("lr must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return fail("epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("moment decay rates must lie in [0, 1)");
        }
        if !(self.eps_log > 0.0 && self.eps_log < 0.5) {
            return fail("eps_log must lie in (0, 0.5)");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Objectives

/// Cross-entropy and separation terms of one video: `-ln p[label]` and
/// `1 - |max(p[1..]) - p[0]|`, logs clamped below at `eps_log`.
pub fn categorization_terms<T: Scalar>(
    g: &mut Graph<T>,
    p_avg: Var,
    label: usize,
    eps_log: f64,
) -> Result<(Var, Var)> {
    let c = g.value(p_avg).numel();
    if c < 2 {
        return Err(TrainError::Config("categorization needs at least two labels".into()));
    }
    if label >= c {
        return Err(TrainError::Config(format!("label {label} outside {c} classes")));
    }
    let p_true = g.gather(p_avg, &[label])?;
    let p_true = g.clamp(p_true, T::lit(eps_log), T::one());
    let log_p = g.log(p_true);
    let ce = g.scale(log_p, T::lit(-1.0));

    let anomalies: Vec<usize> = (1..c).collect();
    let rest = g.gather(p_avg, &anomalies)?;
    let rest = g.reshape(rest, &[c - 1, 1])?;
    let best = g.topm_mean_cols(rest, 1)?;
    let normal = g.gather(p_avg, &[0])?;
    let gap = g.sub(best, normal)?;
    let gap = g.abs(gap);
    let sep = g.affine(gap, T::lit(-1.0), T::one());
    Ok((ce, sep))
}

/// Mean of the top-M frame scores of an `[n × 1]` score column.
pub fn video_level_mil<T: Scalar>(g: &mut Graph<T>, s: Var, topm_divisor: usize) -> Result<Var> {
    let n = g.value(s).shape()[0];
    Ok(g.topm_mean_cols(s, top_m(n, topm_divisor))?)
}

/// Weighted binary cross-entropy of one video-level prediction.
pub fn mil_term<T: Scalar>(g: &mut Graph<T>, q_hat: Var, anomalous: bool, w: f64, eps_log: f64) -> Var {
    let q = g.clamp(q_hat, T::lit(eps_log), T::lit(1.0 - eps_log));
    let target = if anomalous {
        q
    } else {
        g.affine(q, T::lit(-1.0), T::one())
    };
    let l = g.log(target);
    g.scale(l, T::lit(-w))
}

/// `#normal / #anomalous` for anomalous samples, 1 for normal ones; all
/// ones when either count is zero. The ratio is floored at 1 so the weight
/// never lightens the anomalous penalty in anomaly-heavy batches.
pub fn compute_loss_weights(anomalous: &[bool]) -> Vec<f64> {
    let a = anomalous.iter().filter(|&&q| q).count();
    let n = anomalous.len() - a;
    if a == 0 || n == 0 {
        return vec![1.0; anomalous.len()];
    }
    let ratio = (n as f64 / a as f64).max(1.0);
    anomalous.iter().map(|&q| if q { ratio } else { 1.0 }).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CatLoss {
    #[serde(rename = "L_cat")]
    pub cat: f64,
    #[serde(rename = "L_ce")]
    pub ce: f64,
    #[serde(rename = "L_sep")]
    pub sep: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetLoss {
    #[serde(rename = "L_det")]
    pub det: f64,
    #[serde(rename = "L_D_MIL")]
    pub d_mil: f64,
    #[serde(rename = "L_S_MIL")]
    pub s_mil: f64,
}

/// Batch categorization loss from video-level label distributions.
pub fn loss_categorization(p_avg: &[Vec<f64>], labels: &[usize], eps_log: f64) -> Result<CatLoss> {
    if p_avg.len() != labels.len() || p_avg.is_empty() {
        return Err(TrainError::Config("batch sizes disagree or batch is empty".into()));
    }
    let mut out = CatLoss::default();
    for (p, &label) in p_avg.iter().zip(labels) {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::vector(p.clone()));
        let (ce, sep) = categorization_terms(&mut g, v, label, eps_log)?;
        out.ce += g.value(ce).item();
        out.sep += g.value(sep).item();
    }
    let n = labels.len() as f64;
    out.ce /= n;
    out.sep /= n;
    out.cat = out.ce + out.sep;
    Ok(out)
}

/// Batch MIL losses from per-stream video-level predictions.
pub fn loss_detection_mil(
    q_dyn: &[f64],
    q_sta: &[f64],
    anomalous: &[bool],
    w: &[f64],
    eps_log: f64,
) -> Result<DetLoss> {
    let n = anomalous.len();
    if n == 0 || q_dyn.len() != n || q_sta.len() != n || w.len() != n {
        return Err(TrainError::Config("batch sizes disagree or batch is empty".into()));
    }
    let stream = |q: &[f64]| -> f64 {
        let mut g = Graph::<f64>::new();
        let mut total = 0.0;
        for i in 0..n {
            let v = g.constant(Tensor::vector(vec![q[i]]));
            let t = mil_term(&mut g, v, anomalous[i], w[i], eps_log);
            total += g.value(t).item();
        }
        total / n as f64
    };
    let d_mil = stream(q_dyn);
    let s_mil = stream(q_sta);
    Ok(DetLoss {
        det: d_mil + s_mil,
        d_mil,
        s_mil,
    })
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// A zero learning rate leaves the store untouched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        if self.lr == 0.0 {
            return;
        }
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grads = p.grad.data().to_vec();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i].to_f64_lossy();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let old = x.to_f64_lossy();
                *x = T::lit(old - self.lr * (self.weight_decay * old + update));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Protocol

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Temporal encoder on the categorization loss.
    Stage1,
    /// Augmenters and detectors on the detection loss.
    Stage2,
    /// Every module on both losses in one phase.
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Stage1 => "stage1",
            Self::Stage2 => "stage2",
            Self::Joint => "joint",
        }
    }

    /// Whether the parameter named `name` is updated in this stage.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Self::Stage1 => name.starts_with(TEMPORAL_PREFIX),
            Self::Stage2 => !name.starts_with(TEMPORAL_PREFIX),
            Self::Joint => true,
        }
    }

    fn code(self) -> u64 {
        match self {
            Self::Stage1 => 1,
            Self::Stage2 => 2,
            Self::Joint => 3,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub cat: Option<CatLoss>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub det: Option<DetLoss>,
    pub wall_ms: u64,
}

/// Receives each finished epoch together with the updated model.
pub trait EpochSink {
    fn on_epoch(&mut self, log: &EpochLog, model: &AnomizeModel<f32>) -> Result<()>;
}

/// Discards epochs.
pub struct NoSink;

impl EpochSink for NoSink {
    fn on_epoch(&mut self, _: &EpochLog, _: &AnomizeModel<f32>) -> Result<()> {
        Ok(())
    }
}

/// Appends epochs to `train_log.jsonl` and writes one checkpoint per epoch
/// under `checkpoints/` in the run directory.
pub struct RunDirSink {
    pub dir: PathBuf,
}

impl RunDirSink {
    pub fn checkpoint_path(dir: &Path, stage: Stage, epoch: usize) -> PathBuf {
        dir.join("checkpoints").join(format!("{}_epoch{epoch:03}.json", stage.name()))
    }

    pub fn final_path(dir: &Path, stage: Stage) -> PathBuf {
        dir.join("checkpoints").join(format!("{}_final.json", stage.name()))
    }
}

impl EpochSink for RunDirSink {
    fn on_epoch(&mut self, log: &EpochLog, model: &AnomizeModel<f32>) -> Result<()> {
        let path = self.dir.join("train_log.jsonl");
        std::fs::create_dir_all(&self.dir).map_err(|e| DataError::io(&self.dir, e))?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| DataError::io(&path, e))?;
        let line = serde_json::to_string(log).expect("log serializes");
        writeln!(f, "{line}").map_err(|e| DataError::io(&path, e))?;
        let cursor = Cursor {
            stage: log.stage.name().into(),
            epoch: log.epoch,
        };
        save_checkpoint(&Self::checkpoint_path(&self.dir, log.stage, log.epoch), model, cursor)?;
        Ok(())
    }
}

/// Per-video inputs that stay fixed during a stage.
struct Prepared {
    x: Tensor<f32>,
    label: usize,
    anomalous: bool,
    /// Temporal encoding, cached when the encoder is frozen.
    x_tem: Option<Tensor<f32>>,
    selection: Option<ConceptSelection<f32>>,
}

struct VideoPass {
    cat: Option<(f64, f64)>,
    det: Option<(f64, f64)>,
    finite: bool,
    grads: Vec<(ParamId, Tensor<f32>)>,
}

fn uses_dynamic(mode: StreamMode) -> bool {
    mode != StreamMode::Static
}

fn uses_static(mode: StreamMode) -> bool {
    mode != StreamMode::Dynamic
}

fn video_pass(
    model: &AnomizeModel<f32>,
    v: &Prepared,
    text: &TextInputs<f32>,
    stage: Stage,
    weight: f64,
    batch: usize,
    eps_log: f64,
) -> Result<VideoPass> {
    let mut g = Graph::<f32>::new();
    let inv = 1.0 / batch as f32;
    let mode = model.config.streams;
    let xf = g.constant(v.x.clone());
    let t = g.constant(text.t_desc.clone());
    let x_tem = match &v.x_tem {
        Some(cached) => g.constant(cached.clone()),
        None => model.temporal_encode(&mut g, xf)?,
    };

    let mut terms: Vec<Var> = Vec::new();
    let mut cat = None;
    if stage != Stage::Stage2 {
        let fused = model.fuse_visual(&mut g, x_tem, xf, model.config.alpha(Phase::Train))?;
        let p_frame = model.align_frames(&mut g, fused, t)?;
        let p_avg = model.aggregate_top_m(&mut g, p_frame)?;
        let (ce, sep) = categorization_terms(&mut g, p_avg, v.label, eps_log)?;
        cat = Some((g.value(ce).item().into(), g.value(sep).item().into()));
        terms.push(ce);
        terms.push(sep);
    }
    let mut det = None;
    if stage != Stage::Stage1 {
        let div = model.config.topm_divisor;
        let mut d = 0.0;
        let mut s = 0.0;
        if uses_dynamic(mode) {
            let s_dyn = model.dynamic_score(&mut g, x_tem, t)?;
            let q = video_level_mil(&mut g, s_dyn, div)?;
            let l = mil_term(&mut g, q, v.anomalous, weight, eps_log);
            d = g.value(l).item().into();
            terms.push(l);
        }
        if uses_static(mode) {
            let sel = v.selection.as_ref().expect("selection prepared for detection stages");
            let s_sta = model.static_score(&mut g, xf, sel)?;
            let q = video_level_mil(&mut g, s_sta, div)?;
            let l = mil_term(&mut g, q, v.anomalous, weight, eps_log);
            s = g.value(l).item().into();
            terms.push(l);
        }
        det = Some((d, s));
    }
    let stacked = g.concat(&terms, 0)?;
    let total = g.sum(stacked);
    let loss = g.scale(total, inv);
    let finite = g.value(loss).all_finite();
    let grads = if finite {
        let gr = g.backward(loss)?;
        g.param_grads(&gr)
    } else {
        Vec::new()
    };
    Ok(VideoPass {
        cat,
        det,
        finite,
        grads,
    })
}

fn param_norms(store: &ParamStore<f32>) -> String {
    store
        .iter()
        .map(|p| format!("{}={:.4e}", p.name, p.value.norm().to_f64_lossy()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn prepare(
    model: &AnomizeModel<f32>,
    videos: &[Video],
    text: &TextInputs<f32>,
    stage: Stage,
) -> Result<Vec<Prepared>> {
    let limit = model.config.max_train_frames;
    let needs_selection = stage != Stage::Stage1 && uses_static(model.config.streams);
    videos
        .par_iter()
        .map(|v| {
            let x = subsample_frames(&v.features, limit);
            let x_tem = if stage == Stage::Stage2 {
                Some(model.encode_sequence(&x)?)
            } else {
                None
            };
            let selection = if needs_selection {
                Some(retrieve_concepts(&x, &text.concepts, model.config.concepts_k)?)
            } else {
                None
            };
            Ok(Prepared {
                label: v.label,
                anomalous: v.is_anomalous(),
                x,
                x_tem,
                selection,
            })
        })
        .collect()
}

/// Runs one training stage, applying its freeze mask first.
pub fn run_stage(
    model: &mut AnomizeModel<f32>,
    videos: &[Video],
    text: &TextInputs<f32>,
    cfg: &TrainConfig,
    stage: Stage,
    epochs: usize,
    sink: &mut dyn EpochSink,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(TrainError::Config("no training videos".into()));
    }
    model.params.set_trainable(|name| stage.trains(name));
    model.params.zero_grad();
    let data = prepare(model, videos, text, stage)?;
    let mut opt = AdamW::new(cfg);
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (stage.code() << 32) ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut cat_sum = (0.0, 0.0);
        let mut det_sum = (0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let flags: Vec<bool> = batch.iter().map(|&i| data[i].anomalous).collect();
            let weights = compute_loss_weights(&flags);
            let shared: &AnomizeModel<f32> = model;
            let passes: Vec<VideoPass> = batch
                .par_iter()
                .zip(weights.par_iter())
                .map(|(&i, &w)| video_pass(shared, &data[i], text, stage, w, batch.len(), cfg.eps_log))
                .collect::<Result<_>>()?;
            let n = batch.len() as f64;
            let mut bc = (0.0, 0.0);
            let mut bd = (0.0, 0.0);
            for p in &passes {
                if let Some((ce, sep)) = p.cat {
                    bc.0 += ce / n;
                    bc.1 += sep / n;
                }
                if let Some((d, s)) = p.det {
                    bd.0 += d / n;
                    bd.1 += s / n;
                }
            }
            let finite = [bc.0, bc.1, bd.0, bd.1].iter().all(|v| v.is_finite())
                && passes.iter().all(|p| p.finite && p.grads.iter().all(|(_, g)| g.all_finite()));
            if !finite {
                return Err(TrainError::NonFinite {
                    stage: stage.name().into(),
                    epoch,
                    batch: b,
                    norms: param_norms(&model.params),
                });
            }
            for p in passes {
                for (id, g) in p.grads {
                    model.params.get_mut(id).grad.add_assign(&g);
                }
            }
            opt.step(&mut model.params);
            model.params.zero_grad();
            cat_sum.0 += bc.0;
            cat_sum.1 += bc.1;
            det_sum.0 += bd.0;
            det_sum.1 += bd.1;
        }
        let nb = batches.len() as f64;
        let log = EpochLog {
            stage,
            epoch,
            cat: (stage != Stage::Stage2).then(|| CatLoss {
                cat: (cat_sum.0 + cat_sum.1) / nb,
                ce: cat_sum.0 / nb,
                sep: cat_sum.1 / nb,
            }),
            det: (stage != Stage::Stage1).then(|| DetLoss {
                det: (det_sum.0 + det_sum.1) / nb,
                d_mil: det_sum.0 / nb,
                s_mil: det_sum.1 / nb,
            }),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!("{} epoch {epoch}: {}", stage.name(), serde_json::to_string(&log).unwrap_or_default());
        sink.on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

pub fn run_stage1(
    model: &mut AnomizeModel<f32>,
    videos: &[Video],
    text: &TextInputs<f32>,
    cfg: &TrainConfig,
    sink: &mut dyn EpochSink,
) -> Result<Vec<EpochLog>> {
    run_stage(model, videos, text, cfg, Stage::Stage1, cfg.epochs_stage1, sink)
}

pub fn run_stage2(
    model: &mut AnomizeModel<f32>,
    videos: &[Video],
    text: &TextInputs<f32>,
    cfg: &TrainConfig,
    sink: &mut dyn EpochSink,
) -> Result<Vec<EpochLog>> {
    run_stage(model, videos, text, cfg, Stage::Stage2, cfg.epochs_stage2, sink)
}

/// Single-phase ablation: both objectives, nothing frozen. Runs for
/// `epochs_stage1 + epochs_stage2` epochs.
pub fn run_joint(
    model: &mut AnomizeModel<f32>,
    videos: &[Video],
    text: &TextInputs<f32>,
    cfg: &TrainConfig,
    sink: &mut dyn EpochSink,
) -> Result<Vec<EpochLog>> {
    run_stage(model, videos, text, cfg, Stage::Joint, cfg.epochs_stage1 + cfg.epochs_stage2, sink)
}

/// Video-level categorization accuracy on `videos` (anomalous ones only).
pub fn categorization_accuracy(
    model: &AnomizeModel<f32>,
    videos: &[Video],
    t_desc: &Tensor<f32>,
    phase: Phase,
) -> Result<f64> {
    let hits: Vec<Option<bool>> = videos
        .par_iter()
        .map(|v| {
            if !v.is_anomalous() {
                return Ok(None);
            }
            let mut g = Graph::new();
            let p = model.categorize(&mut g, &v.features, t_desc, phase)?;
            Ok(Some(crate::model::predict_video(g.value(p).data()) == v.label))
        })
        .collect::<Result<_>>()?;
    let scored: Vec<bool> = hits.into_iter().flatten().collect();
    if scored.is_empty() {
        return Err(TrainError::Config("no anomalous videos to score".into()));
    }
    Ok(scored.iter().filter(|&&h| h).count() as f64 / scored.len() as f64)
}
