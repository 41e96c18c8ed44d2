//! Mean-teacher semi-supervised segmentation of paired two-modality images,
//! with reliable unlabeled sample selection, on a synthetic tube dataset.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod mean_teacher;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod russ;
pub mod tensor;

pub use error::{Error, Result};
