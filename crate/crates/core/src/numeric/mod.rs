//! Dense tensors, neural primitives and reverse-mode differentiation.

mod graph;
mod gradcheck;
mod init;
pub mod io;
pub mod linalg;
pub mod ops;
mod params;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_with, relative_error, GRADIENT_FLOOR, GradCheckOptions, GradCheckReport};
pub use graph::{Backward, Gradients, Graph, Var};
pub use init::Init;
pub use ops::PoolMode;
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
