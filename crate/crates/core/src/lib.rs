//! Reality-oriented adaptation (ROAD) for synthetic-to-real semantic
//! segmentation, at a scale that trains on one CPU core.
//!
//! * [`scene`] / [`dataset`]: procedural two-style street scenes and their
//!   on-disk form.
//! * [`model`]: student network, frozen teacher, per-region domain classifiers.
//! * [`losses`]: distillation, spatial splitting, adversarial domain loss and
//!   the joint objective.
//! * [`pretrain`]: the proxy task that produces the teacher.
//! * [`train`] / [`checkpoint`]: the training loop and its resumable state.
//! * [`eval`] / [`ablation`]: confusion matrices, IoU and the ablation suites.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pretrain;
pub mod scene;
pub mod train;

pub use error::{Result, RoadError};
