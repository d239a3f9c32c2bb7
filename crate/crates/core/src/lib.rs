//! Multi-view transformer fusion for long-tailed multi-label classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: a tape-based reverse-mode autodiff substrate in `f64`.
//! * [`model`]: single-view backbone, cross-attention class-query head and the
//!   multi-view fusion encoder.
//! * [`losses`]: weighted BCE, asymmetric loss and their combination.
//! * [`metrics`]: AP, mAP, AUROC and head/medium/tail reporting.
//! * [`data`]: studies, label semantics, manifests and the synthetic generator.
//! * [`training`]: AdamW, cosine schedule, two-stage training, checkpoints and
//!   self-training.
//! * [`baselines`]: single-view, weighted-average and concat+GAP comparisons.
//! * [`cli`]: the command-line entry point.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
