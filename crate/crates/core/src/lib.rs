//! Emotion recognition in dyadic conversations: corpus handling, knowledge
//! graph augmentation, lexicon sentiment features, a small shared-layer
//! transformer encoder trained from scratch, and evaluation.

pub mod checkpoint;
pub mod classify;
pub mod corpus;
pub mod encoder;
pub mod kgclient;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod sentlex;
pub mod synth;
pub mod textprep;

pub use scalar::Scalar;

pub type EncoderParamsF64 = encoder::EncoderParams<f64>;
pub type EncoderParamsF32 = encoder::EncoderParams<f32>;
pub type HeadParamsF64 = classify::HeadParams<f64>;
pub type HeadParamsF32 = classify::HeadParams<f32>;
pub type ClassifierF64 = classify::Classifier<f64>;
pub type ClassifierF32 = classify::Classifier<f32>;
pub type PredictionF64 = classify::Prediction<f64>;
pub type MetricsReportF64 = metrics::MetricsReport<f64>;
pub type CheckpointF64 = checkpoint::Checkpoint<f64>;
