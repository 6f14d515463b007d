//! Age-period-cohort-interaction (APC-I) modelling.
//!
//! Cohort effects are treated as a structured part of the age-by-period
//! interaction in a sum-to-zero coded GLM. The crate provides:
//!
//! - [`grid`]: age/period binning and diagonal cohort indexing
//! - [`design`]: coded design matrices, contrasts, rank analysis
//! - [`glm`]: weighted IRLS fits with deviance F, contrast t, and Wald tests
//! - [`apci`]: the global, per-cohort, average-deviation, and life-course tests
//! - [`sim`]: synthetic data with known effects, and the accounting-model
//!   identification demo
//! - [`data`]: CSV record input and output
//! - [`report`]: fixed-layout text report

pub mod apci;
pub mod data;
pub mod design;
pub mod glm;
pub mod grid;
pub mod linalg;
pub mod report;
pub mod sim;
