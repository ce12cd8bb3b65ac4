//! Minimal CPU network engine: convolutions lowered to GEMM, with
//! hand-written backward passes.

pub mod gridnet;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use gridnet::{parameter_count, Architecture, GridNetConfig, ParamEntry, Trace};
pub use scalar::Scalar;
pub use tensor::Tensor;
