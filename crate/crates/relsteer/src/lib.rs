//! Desk-scale laboratory for learned-loss test-time steering.
//!
//! The pipeline: generate synthetic per-object cross-attention stacks
//! with a controllable relation-word watermark, train a transformer
//! relation classifier on them (with dual-inversion augmentation to
//! defeat the watermark shortcut), then use the frozen classifier as a
//! differentiable loss to steer a toy generator's latent toward the
//! spatial relations parsed from a prompt, scored with GenEval-style
//! and T2I-CompBench-style metrics.

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod parser;
pub mod steering;
pub mod synth;
pub mod tape;
pub mod training;

pub use error::CoreError;
