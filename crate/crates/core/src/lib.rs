//! Dehazing by heterogeneous knowledge distillation: synthetic haze data, a
//! super-resolution teacher, a lightweight attention student, affinity
//! distillation losses, training loops and quality/compute measurement.

pub mod ablation;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod haze;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod student;
pub mod teacher;
pub mod trainer;

pub use error::{CheckpointError, CoreError, Result};
pub use image::ImageRGB;
