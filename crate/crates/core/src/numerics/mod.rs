//! Differentiable computation substrate.

mod adam;
mod gradcheck;
mod graph;
mod init;
mod param;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{log_softmax_rows, softmax_rows, Graph, SincBankSpec, Var};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use init::xavier;
pub use tensor::Tensor;
pub(crate) use graph::sinc_cutoffs;
