//! Thin-plate-spline spatial transformers, convolutional attention and a miniature
//! detector, with a synthetic benchmark harness.

pub mod cbam;
pub mod detect;
pub mod harness;
pub mod numeric;
pub mod sampler;
pub mod stn;
pub mod tps;
pub mod verify;

use numeric::NumericError;
use tps::TpsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Tps(#[from] TpsError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
