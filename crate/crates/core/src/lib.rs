//! Non-stationary Matérn priors built from a finite-difference SPDE, hierarchical
//! length-scale models, and a Gibbs / Metropolis-within-Gibbs sampler for linear
//! Gaussian inverse problems.
//!
//! The usual flow is: build a [`grid::Grid`], assemble a [`spde::PrecisionFactor`]
//! for some length-scale field, wrap observations in a [`forward::ForwardProblem`],
//! pick a [`hyper::HyperModel`] and call [`sampler::run_chain`].

pub mod error;
pub mod forward;
pub mod grid;
pub mod hyper;
pub mod kde;
pub mod oracle;
pub mod sampler;
pub mod sparse;
pub mod spde;

pub use error::{Error, Result};
