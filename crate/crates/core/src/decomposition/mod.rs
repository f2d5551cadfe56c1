//! Finite-k forecast-error decomposition.
//!
//! Mean error of the inverse-OLS forecast, in units of `q'(y_M)`, splits into
//! a distribution-free rank term, a curvature term proportional to
//! `q''/q'`, an occupancy term from rare mixture modes, and a residual.

mod diagnostics;
mod empirical;
mod rank;

pub use diagnostics::{hazard_diagnostic, split_mismatch, HazardRow};
pub use empirical::{
    empirical_decomposition, estimator_error_mc, k_sweep, local_quadratic_fit, occupancy_gap_mc, ComponentErrors,
    DecompositionConfig, DecompositionInput, DecompositionReport, EstimatorTarget, FitSampler, KSweepRow,
    LocalQuadratic, ScoreSampler,
};
pub use rank::{
    nominal_curvature_coefficient, nominal_offsets, occupancy_probability, offset_functional,
    offset_functional_derivative, rank_coefficient_mc, OccupancyProbability, RankCoefficient, RankLimitDraw,
    EULER_GAMMA,
};
