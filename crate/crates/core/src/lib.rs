//! Open-vocabulary video anomaly detection over frame-feature sequences:
//! text-augmented dual-stream anomaly scoring, text-aligned categorization,
//! two-stage training and the evaluation metrics.

pub mod dataio;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod textbank;
pub mod training;
