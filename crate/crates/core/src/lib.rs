//! Fisher-diagonal estimation and its applications for small MLPs.
//!
//! The crate trains dense networks with SGD/Adam/AdamW, estimates the Fisher
//! diagonal in several ways (empirical, Monte-Carlo, joint, exact
//! enumeration), recycles Adam's squared-gradient accumulator as a free
//! Fisher proxy (the *Squisher*), and uses any of them for model merging,
//! pruning, sparse masks, task embeddings and elastic weight consolidation.

pub mod container;
pub mod data;
pub mod embed;
pub mod error;
pub mod ewc;
pub mod fisher;
pub mod merge;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sparsify;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fisher::{FisherDiagonal, FisherKind, Scaling};
pub use nn::{Activation, Head, Label, MlpSpec};
pub use optim::{Checkpoint, OptimizerKind, OptimizerState};
pub use params::ParamVector;
pub use tensor::Tensor;
