//! Confusion-penalty label smoothing (CPLS) and its baselines, expected
//! calibration error, and a small deterministic training harness that compares
//! target strategies on desk-scale classifiers.
//!
//! Module map:
//!
//! - [`math`]: dense vectors/matrices, stable softmax, analytic and numeric gradients
//! - [`data`]: synthetic confusable blobs, feature CSV I/O, stratified splits
//! - [`smoothing`]: target construction, losses, the validation confusion tracker
//! - [`trainer`]: feed-forward softmax classifier with warmup-then-hybrid training
//! - [`calibration`]: reliability bins and ECE
//! - [`runner`]: config-driven experiments (`generate`, `train`, `compare`, `report`)
//!
//! With the default `parallel` feature, per-sample work inside a batch, dataset
//! evaluation and independent experiment runs are spread over a rayon pool.
//! Reductions always happen in ascending sample order, so results are
//! bit-identical with and without the feature.

pub mod calibration;
pub mod data;
pub mod error;
pub mod math;
pub mod par;
pub mod runner;
pub mod smoothing;
pub mod trainer;

pub use error::{Error, Result};
