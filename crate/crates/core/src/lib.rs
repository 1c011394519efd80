//! Class-conditional GAN compression by channel pruning and
//! attention-map distillation.

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod export;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod pruning;
pub mod report;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
