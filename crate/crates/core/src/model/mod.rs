//! Forward computation: temporal encoding, text-aligned categorization, the
//! augmenter and the two detection streams.

mod config;
mod layers;

pub use config::{top_m, ModelConfig, Phase, StreamMode};
pub use layers::{Linear, Lstm, Mlp};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{
    self, argmax, cosine_sim_matrix, softmax, Graph, KeyLayout, ParamStore, Scalar, Tensor,
    TensorError, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error("empty frame sequence")]
    EmptySequence,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Parameter-name prefix of the temporal encoder.
pub const TEMPORAL_PREFIX: &str = "temporal.";

/// Multi-head attention from visual queries to text keys/values, a linear
/// projection of the visual input, and an MLP over their concatenation.
#[derive(Clone, Copy, Debug)]
pub struct Augmenter {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub fc: Linear,
    pub mlp: Mlp,
}

/// `sigmoid(FC(x + MLP(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct Detector {
    pub mlp: Mlp,
    pub fc: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Modules {
    lstm: Lstm,
    dyn_aug: Augmenter,
    dyn_det: Detector,
    sta_aug: Augmenter,
    sta_det: Detector,
}

/// Frozen text-side inputs: description encodings and the concept library.
#[derive(Clone, Debug)]
pub struct TextInputs<T: Scalar = f32> {
    /// `[c × d]`, row 0 is the normal label.
    pub t_desc: Tensor<T>,
    /// `[m × d]`.
    pub concepts: Tensor<T>,
}

impl<T: Scalar> TextInputs<T> {
    pub fn cast<U: Scalar>(&self) -> TextInputs<U> {
        TextInputs {
            t_desc: self.t_desc.cast(),
            concepts: self.concepts.cast(),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.t_desc.shape()[0]
    }
}

/// Per-frame top-K concepts and their softmax-weighted vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSelection<T: Scalar = f32> {
    pub indices: Vec<Vec<usize>>,
    /// `[n × K × d]`
    pub h_f: Tensor<T>,
    /// `[n × K]` cosine similarities.
    pub s_f: Tensor<T>,
    /// `[n × K]` softmax of `s_f` per frame.
    pub weights: Tensor<T>,
    /// `[n × K × d]`
    pub h_f_new: Tensor<T>,
}

/// Top-K library rows per frame by cosine similarity, weighted by the
/// softmax of their similarities.
pub fn retrieve_concepts<T: Scalar>(
    x_f: &Tensor<T>,
    library: &Tensor<T>,
    k: usize,
) -> Result<ConceptSelection<T>> {
    let (n, d) = x_f.dims2("retrieve_concepts")?;
    let (m, _) = library.dims2("retrieve_concepts")?;
    if k < 1 || k > m {
        return Err(ModelError::Tensor(TensorError::Param(format!(
            "concepts_k={k} must lie in [1, {m}] (library size)"
        ))));
    }
    let sims = cosine_sim_matrix(x_f, library)?;
    let mut indices = Vec::with_capacity(n);
    let mut h_f = Vec::with_capacity(n * k * d);
    let mut s_f = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n * k);
    let mut h_new = Vec::with_capacity(n * k * d);
    for i in 0..n {
        let (idx, vals) = tensor::topk(sims.row(i), k)?;
        let w = softmax(&Tensor::vector(vals.clone()), 0)?;
        for (slot, &j) in idx.iter().enumerate() {
            let wj = w.data()[slot];
            h_f.extend_from_slice(library.row(j));
            h_new.extend(library.row(j).iter().map(|&v| wj * v));
        }
        s_f.extend(vals);
        weights.extend_from_slice(w.data());
        indices.push(idx);
    }
    Ok(ConceptSelection {
        indices,
        h_f: Tensor::new(vec![n, k, d], h_f)?,
        s_f: Tensor::new(vec![n, k], s_f)?,
        weights: Tensor::new(vec![n, k], weights)?,
        h_f_new: Tensor::new(vec![n, k, d], h_new)?,
    })
}

/// Graph handles produced by a forward pass over one video.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub x_tem: Var,
    pub x_fused: Var,
    /// Raw cosines `[n × c]`.
    pub p_frame: Var,
    /// `[c]`
    pub p_avg: Var,
    pub s_dyn: Var,
    pub s_sta: Var,
    pub s: Var,
}

/// Plain-tensor outputs of inference on one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBundle<T: Scalar = f32> {
    pub s_dyn: Vec<T>,
    pub s_sta: Vec<T>,
    pub s: Vec<T>,
    pub p_frame: Tensor<T>,
    pub p_avg: Vec<T>,
    pub p_video: usize,
    pub top_m: usize,
}

/// Model parameters and configuration.
#[derive(Clone, Debug)]
pub struct AnomizeModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    modules: Modules,
}

impl<T: Scalar> AnomizeModel<T> {
    /// Builds a freshly initialized model; initialization is seeded by
    /// `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, &mut rng, "temporal.lstm", d);
        let augmenter = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str| Augmenter {
            query: Linear::new(store, rng, &format!("{name}.attn.query"), d, d),
            key: Linear::new(store, rng, &format!("{name}.attn.key"), d, d),
            value: Linear::new(store, rng, &format!("{name}.attn.value"), d, d),
            output: Linear::new(store, rng, &format!("{name}.attn.output"), d, d),
            fc: Linear::new(store, rng, &format!("{name}.fc"), d, d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), 2 * d, d, d),
        };
        let dyn_aug = augmenter(&mut store, &mut rng, "dyn.augmenter");
        let sta_aug = augmenter(&mut store, &mut rng, "sta.augmenter");
        let detector = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str| Detector {
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, d, d),
            fc: Linear::new(store, rng, &format!("{name}.fc"), d, 1),
        };
        let dyn_det = detector(&mut store, &mut rng, "dyn.detector");
        let sta_det = detector(&mut store, &mut rng, "sta.detector");
        Ok(Self {
            config,
            params: store,
            modules: Modules {
                lstm,
                dyn_aug,
                dyn_det,
                sta_aug,
                sta_det,
            },
        })
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> AnomizeModel<U> {
        AnomizeModel {
            config: self.config.clone(),
            params: self.params.cast(),
            modules: self.modules,
        }
    }

    /// Same architecture with a replacement parameter store.
    pub fn with_params(&self, params: ParamStore<T>) -> Self {
        Self {
            config: self.config.clone(),
            params,
            modules: self.modules,
        }
    }

    pub fn lstm(&self) -> &Lstm {
        &self.modules.lstm
    }

    pub fn dynamic_augmenter(&self) -> &Augmenter {
        &self.modules.dyn_aug
    }

    pub fn static_augmenter(&self) -> &Augmenter {
        &self.modules.sta_aug
    }

    pub fn dynamic_detector(&self) -> &Detector {
        &self.modules.dyn_det
    }

    pub fn static_detector(&self) -> &Detector {
        &self.modules.sta_det
    }

    fn check_input(&self, x_f: &Tensor<T>) -> Result<usize> {
        let (n, d) = x_f.dims2("features")?;
        if n == 0 {
            return Err(ModelError::EmptySequence);
        }
        if d != self.config.dim {
            return Err(ModelError::Config(format!(
                "feature dim {d} does not match model dim {}",
                self.config.dim
            )));
        }
        Ok(n)
    }

    /// LSTM over the frame features.
    pub fn temporal_encode(&self, g: &mut Graph<T>, x_f: Var) -> Result<Var> {
        let (n, _) = g.value(x_f).dims2("temporal_encode")?;
        if n == 0 {
            return Err(ModelError::EmptySequence);
        }
        Ok(self.modules.lstm.forward(g, &self.params, x_f)?)
    }

    /// `x_tem + alpha * x_f`.
    pub fn fuse_visual(&self, g: &mut Graph<T>, x_tem: Var, x_f: Var, alpha: f64) -> Result<Var> {
        let scaled = g.scale(x_f, T::lit(alpha));
        Ok(g.add(x_tem, scaled)?)
    }

    /// Raw cosine alignment `[n × c]` between fused frames and label encodings.
    pub fn align_frames(&self, g: &mut Graph<T>, x_fused: Var, t_desc: Var) -> Result<Var> {
        Ok(g.cosine_sim(x_fused, t_desc)?)
    }

    /// Softmax over labels of the per-label mean of the top-M frame values,
    /// with logits divided by the temperature.
    pub fn aggregate_top_m(&self, g: &mut Graph<T>, p_frame: Var) -> Result<Var> {
        let (n, _) = g.value(p_frame).dims2("aggregate_top_m")?;
        let m = self.config.top_m(n);
        let pooled = g.topm_mean_cols(p_frame, m)?;
        let logits = g.scale(pooled, T::lit(1.0 / self.config.temperature));
        Ok(g.softmax(logits, 0)?)
    }

    /// Attention from `e_visual` to `e_text`, concatenated with a projection
    /// of `e_visual` and reduced by the MLP.
    pub fn augment(
        &self,
        g: &mut Graph<T>,
        aug: &Augmenter,
        e_visual: Var,
        e_text: Var,
        layout: KeyLayout,
    ) -> Result<Var> {
        let p = &self.params;
        let (q_rows, d) = g.value(e_visual).dims2("augment")?;
        let refined = if self.config.text_augmentation {
            let q = aug.query.forward(g, p, e_visual)?;
            let k = aug.key.forward(g, p, e_text)?;
            let v = aug.value.forward(g, p, e_text)?;
            let att = g.attention(q, k, v, self.config.heads, layout)?;
            aug.output.forward(g, p, att)?
        } else {
            g.constant(Tensor::zeros(&[q_rows, d]))
        };
        let projected = aug.fc.forward(g, p, e_visual)?;
        let joined = g.concat(&[refined, projected], 1)?;
        Ok(aug.mlp.forward(g, p, joined)?)
    }

    fn detect(&self, g: &mut Graph<T>, det: &Detector, x: Var) -> Result<Var> {
        let p = &self.params;
        let res = det.mlp.forward(g, p, x)?;
        let sum = g.add(x, res)?;
        let logit = det.fc.forward(g, p, sum)?;
        Ok(g.sigmoid(logit))
    }

    /// Dynamic stream: temporal features augmented by all label descriptions.
    pub fn dynamic_score(&self, g: &mut Graph<T>, x_tem: Var, t_desc: Var) -> Result<Var> {
        let f_aug = self.augment(g, &self.modules.dyn_aug, x_tem, t_desc, KeyLayout::Shared)?;
        self.detect(g, &self.modules.dyn_det, f_aug)
    }

    /// Static stream: raw features augmented by each frame's own concepts.
    pub fn static_score(&self, g: &mut Graph<T>, x_f: Var, selection: &ConceptSelection<T>) -> Result<Var> {
        let shape = selection.h_f_new.shape();
        let (n, k, d) = (shape[0], shape[1], shape[2]);
        let keys = selection.h_f_new.clone().reshape(vec![n * k, d])?;
        let keys = g.constant(keys);
        let x_aug = self.augment(g, &self.modules.sta_aug, x_f, keys, KeyLayout::PerQuery(k))?;
        self.detect(g, &self.modules.sta_det, x_aug)
    }

    /// `beta * s_dyn + (1 - beta) * s_sta`.
    pub fn fuse_scores(&self, g: &mut Graph<T>, s_dyn: Var, s_sta: Var, beta: f64) -> Result<Var> {
        fuse_scores(g, s_dyn, s_sta, beta)
    }

    /// Effective dynamic-stream weight for this configuration.
    pub fn effective_beta(&self, beta: f64) -> f64 {
        match self.config.streams {
            StreamMode::Dual => beta,
            StreamMode::Dynamic => 1.0,
            StreamMode::Static => 0.0,
        }
    }

    /// Full forward pass over one video.
    ///
    /// `x_tem` may be supplied when the temporal encoder output is already
    /// known (it is frozen during detection training).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x_f: &Tensor<T>,
        text: &TextInputs<T>,
        phase: Phase,
        beta: f64,
    ) -> Result<Forward> {
        self.check_input(x_f)?;
        let selection = retrieve_concepts(x_f, &text.concepts, self.config.concepts_k)?;
        let xf = g.constant(x_f.clone());
        let t_desc = g.constant(text.t_desc.clone());
        let x_tem = self.temporal_encode(g, xf)?;
        let x_fused = self.fuse_visual(g, x_tem, xf, self.config.alpha(phase))?;
        let p_frame = self.align_frames(g, x_fused, t_desc)?;
        let p_avg = self.aggregate_top_m(g, p_frame)?;
        let s_dyn = self.dynamic_score(g, x_tem, t_desc)?;
        let s_sta = self.static_score(g, xf, &selection)?;
        let s = self.fuse_scores(g, s_dyn, s_sta, self.effective_beta(beta))?;
        Ok(Forward {
            x_tem,
            x_fused,
            p_frame,
            p_avg,
            s_dyn,
            s_sta,
            s,
        })
    }

    /// Categorization path only; returns `p_avg`.
    pub fn categorize(&self, g: &mut Graph<T>, x_f: &Tensor<T>, t_desc: &Tensor<T>, phase: Phase) -> Result<Var> {
        self.check_input(x_f)?;
        let xf = g.constant(x_f.clone());
        let t = g.constant(t_desc.clone());
        let x_tem = self.temporal_encode(g, xf)?;
        let fused = self.fuse_visual(g, x_tem, xf, self.config.alpha(phase))?;
        let p_frame = self.align_frames(g, fused, t)?;
        self.aggregate_top_m(g, p_frame)
    }

    /// Detection streams given a precomputed temporal encoding.
    /// Returns `(s_dyn, s_sta)`.
    pub fn detect_streams(
        &self,
        g: &mut Graph<T>,
        x_f: &Tensor<T>,
        x_tem: &Tensor<T>,
        text: &TextInputs<T>,
        selection: &ConceptSelection<T>,
    ) -> Result<(Var, Var)> {
        self.check_input(x_f)?;
        let xf = g.constant(x_f.clone());
        let xt = g.constant(x_tem.clone());
        let t = g.constant(text.t_desc.clone());
        let s_dyn = self.dynamic_score(g, xt, t)?;
        let s_sta = self.static_score(g, xf, selection)?;
        Ok((s_dyn, s_sta))
    }

    /// Temporal encoding evaluated outside any training graph.
    pub fn encode_sequence(&self, x_f: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x_f)?;
        let mut g = Graph::new();
        let xf = g.constant(x_f.clone());
        let out = self.temporal_encode(&mut g, xf)?;
        Ok(g.value(out).clone())
    }

    /// Scores and categorizes one video.
    pub fn infer(&self, x_f: &Tensor<T>, text: &TextInputs<T>, phase: Phase, beta: f64) -> Result<ScoreBundle<T>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, x_f, text, phase, beta)?;
        let col = |v: Var| g.value(v).data().to_vec();
        let p_avg = col(f.p_avg);
        Ok(ScoreBundle {
            s_dyn: col(f.s_dyn),
            s_sta: col(f.s_sta),
            s: col(f.s),
            p_frame: g.value(f.p_frame).clone(),
            p_video: predict_video(&p_avg),
            p_avg,
            top_m: self.config.top_m(x_f.shape()[0]),
        })
    }
}

/// `beta * s_dyn + (1 - beta) * s_sta`; `beta` of exactly 0 or 1 selects a
/// stream without arithmetic.
pub fn fuse_scores<T: Scalar>(g: &mut Graph<T>, s_dyn: Var, s_sta: Var, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(ModelError::Config(format!("beta {beta} outside [0, 1]")));
    }
    if beta == 1.0 {
        return Ok(s_dyn);
    }
    if beta == 0.0 {
        return Ok(s_sta);
    }
    let a = g.scale(s_dyn, T::lit(beta));
    let b = g.scale(s_sta, T::lit(1.0 - beta));
    Ok(g.add(a, b)?)
}

/// Label with the highest probability; the lowest index wins ties.
pub fn predict_video<T: Scalar>(p_avg: &[T]) -> usize {
    argmax(p_avg)
}

/// Evenly spaced frame indices `floor(i * n / limit)` when `n > limit`.
pub fn subsample_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    (0..limit).map(|i| i * n / limit).collect()
}

pub fn subsample_frames<T: Scalar>(x: &Tensor<T>, limit: usize) -> Tensor<T> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n <= limit {
        return x.clone();
    }
    let idx = subsample_indices(n, limit);
    let mut data = Vec::with_capacity(idx.len() * d);
    for i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![limit, d], data).expect("shape")
}
