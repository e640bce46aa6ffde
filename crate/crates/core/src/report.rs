//! Point estimate, variance and confidence interval bundled per target.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators;
use crate::inference::confidence_interval;
use crate::sample::ExperimentSample;
use crate::variance::{self, VarianceDecomposition};

/// Estimand targeted by a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Sample-weighted effect estimated by the individual difference in means.
    Dim,
    /// Equally-weighted cluster-level effect.
    Theta1,
    /// Size-weighted cluster-level effect.
    Theta2,
    /// Size-weighted effect, alternative normalisation.
    Theta2Sd,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Dim, Target::Theta1, Target::Theta2, Target::Theta2Sd];

    pub fn name(self) -> &'static str {
        match self {
            Target::Dim => "dim",
            Target::Theta1 => "theta1",
            Target::Theta2 => "theta2",
            Target::Theta2Sd => "theta2_sd",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown target `{s}`")))
    }
}

/// Which variance estimator produced a report's standard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    Consistent,
    HcNaive,
    ClusterRobust,
    Adjusted,
}

impl fmt::Display for VarianceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceKind::Consistent => "consistent",
            VarianceKind::HcNaive => "hc_naive",
            VarianceKind::ClusterRobust => "cluster_robust",
            VarianceKind::Adjusted => "adjusted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub realized_treated_fraction: f64,
    /// Conventional (HC or cluster-robust) variance on the same scale.
    pub conventional_variance: Option<f64>,
    pub decomposition: Option<VarianceDecomposition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub target: Target,
    pub estimate: f64,
    /// Asymptotic variance on the `sqrt(G)` scale.
    pub variance: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    #[serde(rename = "G")]
    pub g: usize,
    pub variance_kind: VarianceKind,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub(crate) fn assemble(
        target: Target,
        estimate: f64,
        variance: f64,
        g: usize,
        alpha: f64,
        variance_kind: VarianceKind,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        let (ci_lower, ci_upper) = confidence_interval(estimate, variance, g, alpha)?;
        Ok(Self {
            target,
            estimate,
            variance,
            std_error: (variance / g as f64).sqrt(),
            ci_lower,
            ci_upper,
            alpha,
            g,
            variance_kind,
            diagnostics,
        })
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lower <= truth && truth <= self.ci_upper
    }
}

/// Point estimate for `target`.
pub fn point_estimate(sample: &ExperimentSample, target: Target) -> Result<f64> {
    match target {
        Target::Dim => estimators::estimate_dim(sample),
        Target::Theta1 => estimators::estimate_theta1(sample),
        Target::Theta2 => estimators::estimate_theta2(sample),
        Target::Theta2Sd => estimators::estimate_theta2_sd(sample),
    }
}

/// Conventional variance for `target`: HC for the equally-weighted estimator,
/// cluster-robust otherwise.
pub fn conventional_variance(sample: &ExperimentSample, target: Target) -> Result<f64> {
    match target {
        Target::Theta1 => variance::var_hc_theta1(sample),
        Target::Theta2 | Target::Theta2Sd => {
            variance::var_cr_theta2(sample, &variance::cluster_residual_sums(sample)?)
        }
        Target::Dim => {
            let as_sampled = sample.with_sampled_as_size();
            variance::var_cr_theta2(&as_sampled, &variance::cluster_residual_sums(&as_sampled)?)
        }
    }
}

/// Consistent-variance report for `target` at level `alpha`.
pub fn estimate(sample: &ExperimentSample, target: Target, alpha: f64) -> Result<EstimateReport> {
    let est = point_estimate(sample, target)?;
    let decomposition = match target {
        Target::Dim => variance::var_dim(sample)?,
        Target::Theta1 => variance::var_theta1(sample)?,
        Target::Theta2 | Target::Theta2Sd => variance::var_theta2(sample)?,
    };
    let diagnostics = Diagnostics {
        realized_treated_fraction: sample.treated_fraction(),
        conventional_variance: Some(conventional_variance(sample, target)?),
        decomposition: Some(decomposition),
    };
    EstimateReport::assemble(
        target,
        est,
        decomposition.total,
        sample.g(),
        alpha,
        VarianceKind::Consistent,
        diagnostics,
    )
}

/// Report for `target` using the conventional variance estimator.
pub fn estimate_conventional(sample: &ExperimentSample, target: Target, alpha: f64) -> Result<EstimateReport> {
    let est = point_estimate(sample, target)?;
    let var = conventional_variance(sample, target)?;
    let kind = if target == Target::Theta1 {
        VarianceKind::HcNaive
    } else {
        VarianceKind::ClusterRobust
    };
    let diagnostics = Diagnostics {
        realized_treated_fraction: sample.treated_fraction(),
        conventional_variance: Some(var),
        decomposition: None,
    };
    EstimateReport::assemble(target, est, var, sample.g(), alpha, kind, diagnostics)
}
