//! Gridworld tasks with exact, differentiable regret, and the
//! forecastability fine-tuning loop built on them.

pub mod bank;
pub mod baselines;
pub mod env;
pub mod error;
pub mod finetune;
pub mod loss;
pub mod pipeline;
pub mod policy;

pub use env::{optimal_values, policy_values, regret, EnvParams, GridTask, LayoutParams, Severity, ValueTable};
pub use error::{GridError, Result};
pub use policy::{init_params, policy_forward, NetConfig};
