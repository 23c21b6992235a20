//! Dense tensors, a reverse-mode tape, and finite-difference checking.

pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use exec::Exec;
pub use gradcheck::{grad_check, grad_check_report, GradCheckOptions, GradCheckReport, HasParams, ParamCheck};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{Forward, ParamGrads, ParamStore, Parameter};
pub use tensor::Tensor;
