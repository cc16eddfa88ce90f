//! Countermeasures for class imbalance in document classification and
//! segmentation, built from scratch: a synthetic document corpus with
//! pixel-exact ground truth, a minimal reverse-mode autodiff engine,
//! skip-connection classifiers and a 5-level U-Net, imbalance-aware losses
//! (focal, class-weighted Dice), probabilistic augmentation, sign-swap
//! interpolation, balancing samplers, and a reproducible experiment harness.
//!
//! The `forge` binary exposes the whole pipeline on the command line; see the
//! guide in `book/` (also embedded under [`guide`]) for worked examples.

pub mod augment;
pub mod corpus;
pub mod error;
pub mod guide;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ndtensor;
pub mod regionops;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
