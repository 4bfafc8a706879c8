//! Single-stage facial action unit detection at desk scale.
//!
//! The pipeline is: a compact convolutional backbone produces a feature map
//! and pooled vector; a bank of local attention units gates the map; per-AU
//! node features feed a per-sample top-k relation graph and one round of
//! message passing; backbone and AU logits are fused either by a fixed
//! weight or through a weight-token transformer encoder. Training uses
//! plain SGD with a stepped schedule, BCE plus a multi-label circle loss,
//! stride-based video resampling, and fold-ensemble voting. Everything runs
//! on a small deterministic tensor/autodiff core so gradients, invariants,
//! and file formats are all checkable.

pub mod arl;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod lrp;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

/// The twelve AU classes, in the fixed order used by labels, losses,
/// metrics, and files.
pub const AU_NAMES: [&str; 12] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

/// Number of AU classes.
pub const NUM_AU: usize = 12;

/// Indices (into [`AU_NAMES`]) of the five under-represented classes that
/// the sampler draws more densely: AU2, AU15, AU23, AU24, AU26.
pub const RARE_AU_INDICES: [usize; 5] = [1, 7, 8, 9, 11];
