//! Query-only parameter-efficient few-shot classification on a frozen toy
//! vision transformer: tensor/autodiff numerics, backbone, side-chain blocks,
//! episodic data, and the meta-training/evaluation harness.

pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{DType, Real, Tensor};
