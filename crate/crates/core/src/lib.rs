//! Deep-learning grading of ductal carcinoma in situ (DCIS).
//!
//! The crate covers the whole offline pipeline:
//!
//! - [`datamodel`]: grades, observers, consensus labels, manifests and
//!   patient-level stratified splits.
//! - [`patchkit`]: lesion boxes, magnification arithmetic, random patch
//!   cropping and training-time augmentation.
//! - [`model`]: the dual-head convolutional network, the ordinal
//!   cross-entropy loss, class-balanced batching and the training loop.
//! - [`inference`]: median-of-patches lesion grading and percentile-based
//!   patient grading.
//! - [`agreement`]: confusion matrices, quadratic weighted kappa with
//!   analytic confidence intervals and multi-run summaries.
//! - [`synthgen`]: a synthetic lesion generator with a simulated
//!   three-observer panel, used for desk-scale end-to-end runs.

pub mod agreement;
pub mod datamodel;
mod error;
pub mod inference;
pub mod model;
pub mod patchkit;
pub mod seed;
pub mod synthgen;

pub use datamodel::{ConsensusLabel, DatasetManifest, Grade, LesionRecord, ObserverGrades, Subset};
pub use error::{Error, Result};
