//! File formats, run orchestration and the `rlq` command line on top of
//! `rlq-core`.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod evaluate;
pub mod report;
pub mod run;

pub use error::{Error, Result};
