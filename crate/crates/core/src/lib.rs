//! Lesion classification by fusing descriptors from a mammography CNN and an
//! ultrasound CNN.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`graph`]: dense `f64` tensors and tape-based reverse-mode
//!   differentiation over the handful of operations the models need.
//! * [`losses`]: binary cross-entropy and large-margin cosine loss.
//! * [`models`]: the single-modality CNN and the fully connected fusion network.
//! * [`data`]: paired-lesion datasets, PGM/CSV storage, augmentation and the
//!   synthetic generator.
//! * [`training`]: two-stage and end-to-end training.
//! * [`evaluation`]: leave-one-out scoring, ROC/AUC and reader comparison.
//! * [`explain`]: Grad-CAM heatmaps and overlays.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod graph;
mod linalg;
pub mod losses;
pub mod models;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
