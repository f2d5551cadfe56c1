//! Gumbel-tail forecasting of rare failures at deployment scale.
//!
//! Fit a straight line to the top of a log-survival plot, extrapolate it to
//! the deployment size, and measure how the finite-k estimator errs.

pub mod decomposition;
pub mod error;
pub mod forecaster;
pub mod par;
pub mod rng;
pub mod scores;
pub mod tailmodel;

pub use error::{Error, Result};
pub use par::{Execution, McStats};
pub use tailmodel::{Family, HazardPoint, QuantileCurvePoint, TailDistribution};
