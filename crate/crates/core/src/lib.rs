//! Doubly stochastic gradient MCMC for deep generative models.
//!
//! Model parameters are sampled with a multivariate stochastic-gradient
//! Nosé-Hoover thermostat. The expectation over hidden variables inside each
//! gradient is estimated by self-normalized importance sampling, using a
//! recognition network as an adaptive proposal (or, for sigmoid belief
//! networks, by Gibbs sampling).

pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod priors;
pub mod samplers;
pub mod training;

pub use error::{Error, Result};
