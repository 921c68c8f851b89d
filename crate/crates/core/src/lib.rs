//! Multi-resolution convolutional classifier with channel/spatial attention
//! for five-grade ordinal severity scoring of radiographs.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod kernels;
pub mod metrics;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{CheckpointError, Error, Result};
pub use tensor::{DType, Real, Tensor};
