//! Minimal dense-tensor kernel with reverse-mode differentiation, the
//! transformer layers built on it, Adam, and a finite-difference checker.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport, ScalarFn};
pub use graph::{Graph, Var};
pub use optim::{adam_step, AdamHyper, AdamState};
pub use tensor::{ParameterStore, Real, Tensor};
