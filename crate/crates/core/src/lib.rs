//! Explainable sequential recommendation.
//!
//! A black-box sequential recommender produces per-position feature vectors;
//! a multi-head cross-attention block aligns them with embeddings of
//! LLM-extracted textual user preferences. The aligned features score
//! candidate items, and the attention weights over preferences feed a
//! chain-of-thought prompt that explains each recommendation.

pub mod alignment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod evaluator;
pub mod explainer;
pub mod gradcheck;
pub mod harness;
pub mod llm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod preference;
pub mod synthetic;
pub mod tensor;
pub mod text_encoder;
pub mod trainer;

pub use tensor::Matrix;
