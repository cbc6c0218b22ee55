//! Third-stage tooling for surgical instrument instance segmentation.
//!
//! The crate covers the pieces that sit after a two-stage detector:
//!
//! - [`mask`]: binary masks, column-major RLE, boxes and IoU.
//! - [`data`]: instances, datasets, annotation JSON and GT matching.
//! - [`suppress`]: score filtering, cross-class NMS and top-K retention.
//! - [`metrics`]: Challenge IoU, ISI IoU, mean-class IoU and AP50.
//! - [`tensor`]: the small dense-tensor kernel and finite-difference checker.
//! - [`arcloss`]: additive angular-margin loss and plain cross-entropy.
//! - [`msma`]: the multi-scale mask-attended classifier, trainer and relabeler.
//! - [`synth`]: seeded synthetic scenes and aspect/occupancy diagnostics.
//! - [`experiment`]: the mask-vs-box attention train/test experiment.

pub mod arcloss;
pub mod data;
pub mod experiment;
mod error;
pub mod mask;
pub mod metrics;
pub mod msma;
pub mod suppress;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
