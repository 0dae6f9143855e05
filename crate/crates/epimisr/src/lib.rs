//! File formats, dataset IO and the command line around `epimisr-core`.

pub mod checkpoint;
pub mod cli;
pub mod eptn;
mod error;
pub mod fsutil;
pub mod image;
pub mod manifest;
pub mod projection;
pub mod report;

pub use error::{Error, Result};
