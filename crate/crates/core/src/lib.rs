//! Emotion vectors as parameter-space arithmetic.
//!
//! An emotion vector is the difference between a model fine-tuned on
//! emotional speech and the neutral model it started from; scaling it and
//! adding it back to a neutral model controls emotion intensity. This crate
//! provides the checkpoint container, the arithmetic, and a desk-scale
//! multi-speaker pipeline (synthetic corpus, toy acoustic model, speaker
//! encoder, evaluation) for checking how such vectors behave across speakers.

pub mod arith;
pub mod config;
pub mod embed;
pub mod error;
pub mod eval;
pub mod model;
pub mod param_store;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod train;

pub use arith::{apply_vector, combine, extract_vector, vector_stats, EmotionVector, VectorScope, VectorStats};
pub use config::ExperimentConfig;
pub use embed::{secs, EmbedderModel, SpeakerEmbedding, SpeakerTable};
pub use error::{Error, Result};
pub use eval::{Case, ScenarioReport, ScenarioSpec, VectorSource};
pub use model::ModelConfig;
pub use param_store::{CompatibilityReport, ParameterSet, TensorEntry};
pub use pipeline::{Layout, Pipeline};
pub use synth::{Corpus, CorpusConfig, Emotion};
