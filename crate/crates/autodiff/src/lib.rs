//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod check;
mod error;
mod graph;
mod optim;
mod params;

pub use check::{gradient_check, GradCheck};
pub use error::{AdError, Result};
pub use graph::{concat, DetachedSelection, Gradients, Graph, Tensor, Var, PAD};
pub use optim::{AdamW, StepInfo};
pub use params::ParamSet;
