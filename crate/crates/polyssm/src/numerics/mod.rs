//! Minimal dense-tensor arithmetic with reverse-mode differentiation and a
//! finite-difference gradient oracle.

mod findiff;
mod graph;
mod tensor;

pub use findiff::{finite_diff_check, FdEntry, FdReport};
pub use graph::{Graph, ParamId, ParamStore, Parameter, Var};
pub use tensor::{broadcast_shape, sigmoid, DType, Elem, Tensor};
