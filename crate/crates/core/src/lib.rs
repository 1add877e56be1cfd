//! Visual-modality unlearning for two-modality (visual + audio) classifiers.
//!
//! The crate bundles a small reverse-mode differentiation engine, a seeded
//! synthetic paired-modality dataset, MLP encoders with an early-fusion
//! classifier, the cross-modal contrastive unlearning objectives and loop,
//! the Retrain / Finetune / NegGrad+ baselines, and an evaluation harness
//! (per-modality accuracy, UPG, CMSG, membership inference, timing).

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod unlearn;

pub use error::{Error, Result};
