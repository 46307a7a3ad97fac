//! Patch-level classification of hyperspectral scenes.
//!
//! A scene is a `height x width x bands` cube with a per-pixel label map.
//! The pipeline cuts it into non-overlapping 3x3 patches, labels each patch
//! (multi-label: every class present; single-label: the center pixel's
//! class), and trains a two-part network on the patches: a per-pixel spectral
//! autoencoder whose 32-wide bottleneck feeds a dense multi-label or
//! single-label classifier. Three training schemes couple the parts:
//! cascade (pretrain, then freeze), joint (one combined loss), and iterative
//! (alternating blocks).
//!
//! Everything is deterministic: a master seed derives labeled random streams
//! for initialization, dropout, shuffling, and splitting, and all kernels
//! accumulate in fixed order, so a run's artifacts are byte-identical given
//! the same configuration and seed.
//!
//! Module map:
//! - [`nn`]: matrices, dense layers, losses, Adam, StepLR, gradient checking
//! - [`rng`]: labeled deterministic random streams
//! - [`scene`]: scene cube and label map I/O, synthetic scene generation
//! - [`patch`]: patch extraction, labeling, normalization, splitting
//! - [`model`]: the autoencoder and classifier, prediction, checkpoints
//! - [`train`]: the three training schemes and their history records
//! - [`metrics`]: multi-label and single-label evaluation reports
//! - [`experiment`]: config files, run reports, and the command entry points

pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patch;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
