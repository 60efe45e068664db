//! File formats, experiment runs and the command-line front end over `ltlab-core`.

pub use ltlab_core as core;

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fsio;
pub mod ltds;
pub mod report;
pub mod run;

pub use error::{LabError, Result};
