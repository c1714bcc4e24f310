//! Structural selection in longitudinal varying-coefficient models.
//!
//! Each effect is decomposed as `β_k(t) = μ_k + g_k(t)` with `∫₀¹ g_k = 0`;
//! `g_k` is expanded in a centered cubic B-spline basis and the fit
//! minimizes a least-squares loss with a group-lasso penalty on each
//! deviation block and a roughness penalty on its curvature. Blocks shrunk
//! to exact zero are time-invariant; thresholding `μ̂` then separates
//! constant from null effects.
//!
//! Modules follow the pipeline:
//!
//! - [`basis`]: B-spline basis, centered basis and roughness matrix
//! - [`data`]: long-format input, de-meaning, standardization, design blocks
//! - [`solver`]: block coordinate descent, baselines, proximal-gradient oracle
//! - [`structure`]: zero / constant / time-varying partition
//! - [`tuning`]: EBIC and subject-wise cross-validation over a penalty grid
//! - [`simulate`]: data-generating scenarios, metrics and replicated studies
//! - [`artifact`] and [`cli`]: on-disk formats and the command-line driver

pub mod artifact;
pub mod basis;
pub mod cli;
pub mod data;
pub mod error;
pub mod quadrature;
pub mod simulate;
pub mod solver;
pub mod structure;
pub mod tuning;

#[cfg(test)]
mod testutil;

pub use basis::{CenteredSplineBasis, KnotPlacement, RoughnessMatrix, SplineConfig};
pub use data::{load_long_csv, write_long_csv, DesignBlocks, LongitudinalDataset, SubjectRecord};
pub use error::{Error, Result};
pub use solver::{
    fit_baseline, fit_bcd, fit_oracle, objective, predict, Method, ModelFit, PenaltyConfig, SolverOptions,
};
pub use structure::{classify, select_vary, StructuralPartition};
