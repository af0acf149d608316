//! Shapley explanations of multivariate outliers.
//!
//! The squared Mahalanobis distance of an observation is split into
//! per-variable contributions (Shapley values) and pairwise interaction
//! indices, both available in closed form. The contributions drive two
//! cellwise detectors, SCD and MOE, which flag and impute outlying cells.
//! A deterministic simulation harness evaluates the detectors on shift and
//! structured contamination.

pub mod cellwise;
pub mod distributions;
pub mod error;
pub mod estimation;
pub mod linmodel;
pub mod report;
pub mod shapley;
pub mod simulation;
pub mod svg;

pub use cellwise::{
    beta_hat, detect, explain_given_cells, moe, reference_point, scd, Algorithm, CellFlagResult,
    DetectorParams, ReplacementSolution, Snapshot, Status,
};
pub use distributions::{chi2_quantile, noncentral_chi2_quantile, Cutoff};
pub use error::{Error, Result};
pub use linmodel::{build_model, LocationScatter, MaskedVector};
pub use shapley::{
    interaction_matrix, interaction_matrix_at, shapley_value, shapley_value_at, InteractionMatrix,
    ShapleyExplanation,
};
