//! Data-driven personas from sparse ordinal survey responses.
//!
//! The pipeline: factorize the response matrix into individual and question
//! embeddings ([`cf`]), cluster individuals into personas ([`persona`]),
//! measure where personas disagree ([`analytics`]), and train a small
//! soft-prompt network ([`spm`]) that steers a frozen answer model
//! ([`lm`]) toward any persona. [`eval`] reproduces the evaluation
//! protocol with baselines and macro-averaged accuracy.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! scalar to `f64` (the default used by the CLI) or `f32`.

pub mod analytics;
pub mod cf;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod lm;
pub mod optim;
pub mod persona;
pub mod rng;
pub mod scalar;
pub mod spm;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type EmbeddingTable = cf::EmbeddingTable<f64>;
pub type EmbeddingTable32 = cf::EmbeddingTable<f32>;
pub type ClusterModel = persona::ClusterModel<f64>;
pub type ClusterModel32 = persona::ClusterModel<f32>;
pub type PersonaEmbedding = persona::PersonaEmbedding<f64>;
pub type ResponseDistribution = analytics::ResponseDistribution<f64>;
pub type AnswerModel = lm::AnswerModel<f64>;
pub type AnswerModel32 = lm::AnswerModel<f32>;
pub type VirtualPrefix = lm::VirtualPrefix<f64>;
pub type SoftPromptModel = spm::SoftPromptModel<f64>;
pub type SoftPromptModel32 = spm::SoftPromptModel<f32>;
