//! Dense tensors, kernels and tape-based reverse-mode differentiation.
//!
//! Tensors are channels-first and row-major. Kernels live in [`kernels`] as
//! plain functions over [`Tensor`]s; [`Graph`] records their application and
//! replays the matching gradient rules in reverse.

pub mod checkpoint;
mod element;
pub mod error;
mod graph;
pub mod kernels;
mod param;
pub mod rng;
mod tensor;

pub use checkpoint::AnyTensor;
pub use element::{gemm, DType, Element, MatRef};
pub use error::{Result, TensorError};
pub use graph::{Graph, Target, Var};
pub use kernels::Conv2dSpec;
pub use param::{ParamSlot, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;
