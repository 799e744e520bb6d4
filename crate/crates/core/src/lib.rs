//! Mutation-based differential fuzzing of tensor-graph optimizers.

pub mod campaign;
pub mod difftest;
pub mod dljt;
pub mod exec;
pub mod graph;
pub mod heuristic;
pub mod kernels;
pub mod model_mutation;
pub mod optimizer;
pub mod scalar;
pub mod tensor;
pub mod tensor_mutation;

pub use exec::execute_reference;
pub use graph::GraphModel;
pub use kernels::{Buffer, ExecError, ExecErrorKind};
pub use optimizer::{execute_optimized, optimize_graph, OptimizeConfig};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor, TensorData, TensorError};

pub type F64Buffer = Buffer<f64>;
pub type F32Buffer = Buffer<f32>;
pub type Bf16Buffer = Buffer<half::bf16>;
