//! Probabilistic forecasting of seasonal surveillance series with a
//! functional neural process.
//!
//! A GRU with attention pooling embeds each (partial) season as a Gaussian.
//! A stochastic bipartite graph links a query to historical reference
//! seasons through an RBF kernel on sampled embeddings; the local latent
//! summarizes the sampled parents, the global latent pools all references,
//! and a Gaussian head predicts the target. Training maximizes the ELBO
//! with Adam; inference marginalizes by Monte-Carlo and returns an
//! equally weighted Gaussian mixture.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod inference;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod tape;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
