//! Missingness-aware estimates of modality informativeness.
//!
//! The crate trains and scores two-modality classifiers with inverse
//! probability weighting (IPW) so that performance measured on complete cases
//! transports to the full population, and computes partial information
//! decompositions (shared, unique and complementary information) whose
//! marginal constraints and total mutual information are corrected for the
//! same missingness-induced shift.
//!
//! Module map:
//! - [`data`]: datasets with explicit missingness masks and synthetic generators.
//! - [`propensity`]: logistic missingness models and IPW weights.
//! - [`predictors`]: weighted logistic / MLP classifiers and temperature scaling.
//! - [`metrics`]: weighted AUROC, Brier score, batch dispersion.
//! - [`infotheory`]: discrete joints, entropies, mutual information, quantizers.
//! - [`pid`]: brute-force and Sinkhorn-based PID solvers.
//! - [`experiment`]: config-driven runner, presets and reports.

pub mod data;
pub mod error;
pub mod experiment;
pub mod infotheory;
pub mod metrics;
pub mod par;
pub mod pid;
pub mod predictors;
pub mod propensity;
pub mod rng;

pub use error::{Error, Result};
