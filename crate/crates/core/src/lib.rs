//! Dizygotic conditional VAE feature synthesis for few-shot classification.
//!
//! A shared encoder maps a visual feature to a latent Gaussian; one latent
//! draw is decoded twice, once conditioned on the class semantics and once on
//! the class prototype, and the twin features are blended by a learned
//! per-class coefficient. Consistency networks map the blend back to both
//! conditions. The crate also carries the episodic harness used to fine-tune
//! on support sets, synthesize features, and classify queries by kNN.

pub mod episodic;
pub mod error;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{AdamConfig, AdamState, Matrix, Tape, Var};
