//! Semi-supervised training for a miniature two-stage object detector.
//!
//! The library implements the full pipeline on a synthetic shapes corpus:
//!
//! - [`geometry`]: boxes, anchors, IoU, delta codecs, NMS, horizontal flips.
//! - [`tensor`]: dense f64 tensors with reverse-mode gradients, SGD, and a
//!   finite-difference gradient checker.
//! - [`detector`]: backbone + RPN + ROI heads, supervised losses, inference.
//! - [`augment`]: weak (flip/resize) and strong (photometric + cutout)
//!   augmentation with deterministic seeding.
//! - [`pseudo_label`]: teacher-side soft and hard pseudo-label generation,
//!   including the horizontal-flip ROI ensemble.
//! - [`trainer`]: burn-in, mixed-batch semi-supervised steps, EMA teacher
//!   updates, metrics emission.
//! - [`data`]: synthetic scene rendering, corpus archive, dataset splits.
//! - [`eval`]: COCO-style mAP evaluation.
//! - [`verify`]: self-contained oracle/invariant suite used by the CLI.

pub mod augment;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pseudo_label;
pub mod seeding;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
