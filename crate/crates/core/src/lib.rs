//! Long-horizon time-series forecasting with maximum-entropy sparse
//! attention, keys/values distilling and trend/seasonal decomposition.

pub mod alloc;
pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod data;
pub mod decomposition;
pub mod distilling;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod par;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
