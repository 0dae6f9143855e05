use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("point lies on the camera plane (|z| < 1e-12)")]
    AtCameraPlane,
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
