//! Desk-scale offline reinforcement learning lab built around adaptive
//! conservative Q-learning: per-transition conservatism weights learned
//! jointly with twin critics and a tanh-Gaussian actor, with exact tabular
//! fixed-point oracles cross-checking the conservatism identities.

pub mod approximator;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod exec;
pub mod losses;
pub mod quality;
pub mod rng;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
