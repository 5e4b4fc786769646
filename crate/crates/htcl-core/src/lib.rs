//! Core library: dense-matrix autodiff, synthetic domain-shift datasets,
//! heterogeneity measurement and pattern generation (stage 1), invariance
//! contrastive training (stage 2), reference baselines, and the experiment
//! harness behind the `htcl` CLI.

pub mod baselines;
pub mod batching;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod hetero;
pub mod invariant;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
pub use matrix::RealMatrix;
pub use nn::MlpModel;
pub use tape::{Tape, Var, EPS_DIV};
