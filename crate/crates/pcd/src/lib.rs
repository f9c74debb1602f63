//! File formats, experiment runs and the command line around `pcd-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod files;
pub mod manifest;
pub mod metrics;
pub mod runs;
pub mod textconfig;

pub use error::{Error, Result};
