//! Joint point/voxel contrastive pretraining on single-view depth scans.
//!
//! The pipeline: synthetic depth scans ([`data`]) are unprojected to point
//! clouds ([`geometry`]), augmented into two views ([`augment`]), encoded by
//! format-specific networks ([`encoders`]) built on a small reverse-mode
//! autodiff core ([`tensor`]), and trained with within/across-format
//! instance-discrimination losses ([`contrastive`]) by the [`trainer`].
//! [`eval`] measures frozen-feature quality with linear probes and kNN.

pub mod augment;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
