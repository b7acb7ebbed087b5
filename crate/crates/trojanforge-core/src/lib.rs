//! trojanforge-core: a data-poisoning optimization laboratory.
//!
//! The crate trains small feed-forward classifiers, embeds backdoor
//! triggers into a fraction of their training data, searches for the
//! minimal poisoning ratio with a continuous-greedy scheme over a
//! supermodular loss bound, and plays a min-max game against an
//! instance-based Trojan detector so the poisoned model's output
//! distribution becomes indistinguishable from a clean model's.
//!
//! Everything numeric is generic over [`Scalar`] (`f32`/`f64`); the
//! concrete `f64` aliases below are what the CLI and test suites use.

pub mod data;
pub mod error;
pub mod game;
pub mod metrics;
pub mod nn;
pub mod poison;
pub mod scalar;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` instantiations used by the harness and test suites.
pub type Model64 = nn::Model<f64>;
pub type Matrix64 = nn::Matrix<f64>;
pub type LabelDist64 = nn::LabelDist<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type TriggerSpec64 = data::TriggerSpec<f64>;
pub type PoisonedDataset64 = data::PoisonedDataset<f64>;
pub type ProbeSet64 = data::ProbeSet<f64>;
pub type Detector64 = game::Detector<f64>;
