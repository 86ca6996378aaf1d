//! Counterfactual explainable recommendation over a collaborative knowledge graph.
//!
//! The crate wires together:
//!
//! - [`ckg`]: loading, filtering, and indexing interactions plus knowledge
//!   triples into an immutable collaborative knowledge graph,
//! - [`glm`]: graph embeddings via normalized neighbor aggregation with
//!   analytic parameter gradients,
//! - [`recommender`]: a pairwise learning-to-rank latent-factor model,
//! - [`sampler`]: a two-hop attention path sampler with recommendation-list
//!   masking,
//! - [`agent`]: the episode rollout machinery, counterfactual reward,
//!   policy-gradient estimator, and the co-training loop,
//! - [`explain`]: attribute-difference explanations with a fixed sentence
//!   template,
//! - [`eval`]: ranking and explanation-consistency metrics plus audit oracles.
//!
//! The `cerec` binary exposes the full pipeline as subcommands; see the
//! crate README for usage.

pub mod agent;
pub mod ckg;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fixtures;
pub mod glm;
pub mod pipeline;
pub mod recommender;
pub mod sampler;
pub mod synth;
pub mod util;

pub use error::{CerecError, Result};
