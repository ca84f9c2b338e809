//! Offline goal-conditioned RL laboratory.
//!
//! The crate is organised bottom-up:
//!
//! * [`envsim`]: enumerable factored environments with ground-truth task labels.
//! * [`oracle`]: exact temporal distances and executable checks of their structure.
//! * [`tensor`]: a small reverse-mode autodiff substrate (dense layers, GELU,
//!   layer norm, Adam, EMA targets, checkpoints).
//! * [`analogy`]: inner-product temporal-distance learning and dual analogies.
//! * [`cta`]: bilinear-transduction hierarchical agents and their baselines.
//! * [`datagen`]: play-style datasets, hindsight goal sampling, holdout editing.
//! * [`evalkit`]: rollouts, success / direct-success scoring, reports.
//! * [`pipeline`]: the command implementations shared by the CLI and the tests.
//!
//! Data-parallel loops (per-goal BFS, exhaustive checks, rollouts) go through
//! [`par`], which uses rayon when the `parallel` feature is enabled and runs
//! sequentially otherwise.

pub mod analogy;
pub mod config;
pub mod cta;
pub mod datagen;
pub mod envsim;
pub mod error;
pub mod evalkit;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod probe;
pub mod tensor;

pub use error::{Error, Result};
