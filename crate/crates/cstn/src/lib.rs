//! File formats, training and evaluation drivers, and the pipeline stages
//! behind the `cstn` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod cst;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck_suite;
pub mod pipeline;
pub mod png_export;
pub mod report;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
