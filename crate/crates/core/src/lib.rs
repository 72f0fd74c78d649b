//! Deep affinity network tracking, built from scratch.
//!
//! * [`tensor`]: dense arrays, a reverse-mode tape, SGD and the weights container.
//! * [`label`]: ground-truth association matrices with unidentified-target augmentation.
//! * [`data`]: MOTChallenge I/O, augmentations, pair sampling and synthetic scenes.
//! * [`model`]: feature extractor, affinity estimator, losses and training.
//! * [`assignment`]: Hungarian solver and an exhaustive oracle.
//! * [`tracker`]: deep track association over a bounded feature cache.
//! * [`metrics`]: CLEAR-MOT and identity metrics.

pub mod error;
pub mod io;
pub mod assignment;
pub mod data;
pub mod metrics;
pub mod model;
pub mod label;
pub mod tensor;
pub mod tracker;

pub use error::{DanError, Result};
