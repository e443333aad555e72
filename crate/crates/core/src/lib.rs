//! Training-data influence and memorization estimation by subsampled
//! retraining, model compression, and analysis of the test examples on which
//! a compressed model disagrees with its reference.
//!
//! The typical flow:
//!
//! 1. [`influence::sample_masks`] draws Bernoulli inclusion masks,
//! 2. [`influence::run_trials`] retrains a [`influence::Learner`] on each
//!    masked subset,
//! 3. [`influence::estimate_influence`] turns the per-trial correctness into
//!    an influence matrix,
//! 4. [`compression::compress`] derives a compressed model,
//! 5. [`analysis::find_cies`] and [`analysis::cie_influence_test`] test
//!    whether disagreements concentrate on highly influenced examples.

pub mod analysis;
pub mod compression;
pub mod datasets;
pub mod error;
pub mod influence;
pub mod models;
pub mod stats;

pub use error::{Error, Result};
