//! Core of a geometry-aware multi-image super-resolution model.
//!
//! Everything here is pure computation over `alloc` collections: a small
//! reverse-mode tensor engine, pinhole camera geometry, epipolar ray
//! sampling (cast-and-project), the single-image feature extractor, the
//! view/ray transformer fusion stage, metrics, training, and a procedural
//! scene renderer used as ground truth. File formats and the command line
//! live in the `epimisr` crate.

#![no_std]

extern crate alloc;

pub mod camera;
pub mod cap;
pub mod dataset;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod miff;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod resample;
mod scalar;
pub mod scene;
pub mod sisr;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
