//! Latent-activation perturbation search for image classifiers.
//!
//! A generator network maps a latent vector to an image; perturbations are
//! added to its intermediate activations (scaled per neuron by a σ-profile)
//! and optimised so that a classifier predicts a chosen target class. The
//! crate holds a small CPU tensor engine with reverse-mode gradients, the
//! network description and weight archive format, the search itself and the
//! analysis of campaign results.

pub mod analysis;
pub mod archive;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod network;
pub mod ops;
pub mod render;
pub mod search;
pub mod sigma;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{InjectionMask, LayerSpec, Network, NetworkSpec, PerturbationSet, Role, Weights};
pub use search::{AttackConfig, AttackRecord, AttackSetup, AttackStatus, Tuple};
pub use sigma::SigmaProfile;
pub use tensor::Tensor;

/// Toolkit version embedded in every record and output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
