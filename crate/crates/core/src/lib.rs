//! Teacher/student distillation pipeline for point-based 3D object detection.
//!
//! The crate is `no_std` and only needs `alloc`. It contains everything that is
//! pure computation: a small reverse-mode differentiation engine, oriented-box
//! geometry, point sampling and grouping, the sparse voxel feature repository,
//! the training objectives, the teacher and student detectors, and a synthetic
//! scene generator. File formats, the command line and anything touching the
//! operating system live in the `pcd` crate.
//!
//! A student detector uses a single neighborhood query where the teacher uses
//! several, and learns to approximate the teacher's multi-scale features from
//! the teacher's soft outputs. Per-class feature statistics gathered by the
//! teacher are copied into the student's classification head.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod boxes;
pub mod config;
pub mod data;
pub mod detector;
pub mod gradcheck;
pub mod losses;
pub mod repository;
pub mod rng;
pub mod sampling;
pub mod types;

mod error;

pub use config::{PipelineConfig, TrainConfig};
pub use error::{Error, Result};
pub use rng::SeededRng;
pub use types::{normalize_yaw, Box3D, LabeledScene, Point, PointCloud};
