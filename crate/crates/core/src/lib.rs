//! Task-assisted domain adaptation with anchor tasks.
//!
//! A two-headed pixel-labeling network is trained across a synthetic source
//! domain and a "real-like" target domain. The main task (surface normals) is
//! labeled on the source only; an anchor task (segmentation or keypoints) is
//! labeled on both. The crate provides the procedural data generator, the
//! network with its freeze boundary, the losses and training regimes
//! (including the two-stage HeadFreeze schedule and adversarial add-ons),
//! masked angular-error metrics, feature diagnostics and the experiment runner.

pub mod adversarial;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod trainer;

pub use error::{Result, TadaError};
