use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which detection streams contribute to the fused score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    #[default]
    Dual,
    Dynamic,
    Static,
}

/// Whether the fused visual feature uses the training or test weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension shared by visual and text encodings.
    pub dim: usize,
    pub heads: usize,
    /// Weight of the raw features in `x_tem + alpha * x_f` during training.
    pub alpha_train: f64,
    /// Same weight at evaluation time.
    pub alpha_test: f64,
    /// Dynamic-stream share of the fused anomaly score.
    pub beta: f64,
    /// Concepts retrieved per frame.
    pub concepts_k: usize,
    /// Divides alignment logits before the softmax over labels.
    pub temperature: f64,
    pub topm_divisor: usize,
    pub streams: StreamMode,
    /// When false the augmenters see no text (attention output is zero).
    pub text_augmentation: bool,
    /// Longer training sequences are uniformly subsampled to this length.
    pub max_train_frames: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 4,
            alpha_train: 1.0,
            alpha_test: 2.0,
            beta: 0.5,
            concepts_k: 5,
            temperature: 1.0,
            topm_divisor: 16,
            streams: StreamMode::Dual,
            text_augmentation: true,
            max_train_frames: 256,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.concepts_k < 1 {
            return fail("concepts_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.topm_divisor < 1 {
            return fail("topm_divisor must be at least 1".into());
        }
        if self.max_train_frames < 1 {
            return fail("max_train_frames must be at least 1".into());
        }
        if !self.alpha_train.is_finite() || !self.alpha_test.is_finite() {
            return fail("alpha weights must be finite".into());
        }
        Ok(())
    }

    pub fn alpha(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Train => self.alpha_train,
            Phase::Eval => self.alpha_test,
        }
    }

    /// Number of frames averaged by top-M aggregation: `max(1, n / divisor)`.
    pub fn top_m(&self, n: usize) -> usize {
        top_m(n, self.topm_divisor)
    }
}

pub fn top_m(n: usize, divisor: usize) -> usize {
    (n / divisor.max(1)).max(1)
}
