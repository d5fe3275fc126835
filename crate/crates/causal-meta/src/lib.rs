//! Meta-learning causal discovery with unknown intervention targets.
//!
//! This crate jointly infers a causal DAG posterior shared across a
//! collection of small interventional datasets and, per dataset, which
//! variables were intervened on. Task adaptation is analytical: the
//! interventional mechanism's last layer is refit on each support set with a
//! closed-form ridge solution, and gradients flow through that solve into the
//! shared parameters. Gradient-based (MAML-style) adaptation is available as
//! an ablation.
//!
//! Start with the runnable examples (`cargo run --release --example ...`) or
//! the `causal-meta` binary, which drives the full generate / train / adapt /
//! evaluate pipeline.

pub mod cli;
pub mod dag;
pub mod error;
pub mod intv;
pub mod likelihood;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scm;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
