//! Unsupervised domain adaptation for fully convolutional semantic
//! segmentation.
//!
//! The crate is organised around the pieces of the adaptation pipeline:
//!
//! - [`model`]: a small dilated FCN with hand-written reverse-mode gradients.
//! - [`adversary`]: the per-unit domain classifier and its alternating
//!   minimisation against the representation.
//! - [`stats`]: per-class coverage statistics measured on the labeled source.
//! - [`mil`]: image-label inference, size constraints, KL projection and the
//!   re-weighted multiple-instance loss.
//! - [`synth`]: a deterministic generator of paired synthetic domains.
//! - [`eval`]: confusion matrices and IoU.
//! - [`trainer`]: the joint objective and the SOURCE / GA / GA+CA phases.
//! - [`report`]: aggregation of evaluation results into ablation tables.

pub mod adversary;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod mil;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trainer;
mod util;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor3;

/// Reserved label value for pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;
