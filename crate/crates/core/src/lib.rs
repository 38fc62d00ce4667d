//! Factorized hierarchical variational autoencoder for sequential data.
//!
//! Segments of a sequence are encoded into a segment-level latent z₁ with a
//! global prior and a sequence-level latent z₂ whose prior is centred on a
//! per-sequence s-vector μ₂.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod fhvae;
pub mod inference;
pub mod objective;
pub mod oracle;
pub mod recnet;
pub mod trainer;

pub use error::{Error, Result};
