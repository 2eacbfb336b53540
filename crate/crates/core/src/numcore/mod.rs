//! Minimal reverse-mode tensor engine.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_gradients, compare_gradients, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, PairFn, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{Bound, ParamStore};
pub use tensor::{Real, Tensor};
