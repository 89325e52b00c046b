//! Numerical substrate: dense `f64` tensors, a reverse-mode tape, finite
//! difference gradient checking, AdamW and a named-tensor checkpoint file.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod primitives;
pub mod tensor;

pub use checkpoint::{write_atomic, Checkpoint};
pub use error::{NumericsError, Result};
pub use gradcheck::{
    extrapolated_gradient, grad_check, grad_check_extrapolated, max_relative_error, numeric_gradient, relative_error,
};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, OptimizerState};
pub use primitives::{check_all_primitives, primitive_cases, PrimitiveCase};
pub use tensor::{matmul, Tensor};
