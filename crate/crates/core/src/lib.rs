//! Estimation and inference for cluster randomized experiments where
//! treatment is assigned at the cluster level by a covariate-adaptive
//! stratified randomization scheme and cluster sizes may be non-ignorable.
//!
//! The crate provides:
//!
//! * cluster-level domain types and stratum/arm averages ([`sample`]),
//! * assignment mechanisms and within-cluster subsampling ([`randomization`]),
//! * the difference-in-means, equally-weighted and size-weighted point
//!   estimators ([`estimators`]),
//! * design-consistent variance estimators alongside the conventional
//!   heteroskedasticity-robust and cluster-robust ones ([`variance`]),
//! * normal-theory confidence intervals ([`inference`], [`report`]),
//! * linear covariate adjustment ([`adjust`]),
//! * the Beta-Binomial cluster-size simulation designs ([`dgp`]) and a
//!   deterministic parallel replication engine ([`montecarlo`]),
//! * brute-force ground-truth oracles ([`oracle`], behind the `oracle` feature).
//!
//! Variances are reported on the `sqrt(G)` scale: the standard error of an
//! estimate is `sqrt(variance / G)`.

pub mod adjust;
pub mod data;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod montecarlo;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod randomization;
pub mod report;
pub mod sample;
pub mod special;
pub mod variance;

mod linalg;

pub use error::{Error, Result};
pub use report::{EstimateReport, Target, VarianceKind};
pub use sample::{Arm, ClusterRecord, ExperimentSample, TransformKind};
