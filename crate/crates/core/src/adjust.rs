//! Linear covariate adjustment within strata.
//!
//! For each stratum/arm cell the outcome variable `V_g` (`Ybar_g` for the
//! equally-weighted target, `N_g Ybar_g` for the size-weighted one) is
//! regressed on a constant and user-chosen features of `(Z_g, N_g)`. The
//! fitted values enter an augmented inverse-propensity form whose average is
//! the adjusted estimate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::report::{Diagnostics, EstimateReport, Target, VarianceKind};
use crate::sample::{ksum, Arm, ClusterRecord, ExperimentSample, KahanSum};

const RANK_TOLERANCE: f64 = 1e-10;

/// One regressor built from a cluster's covariates and size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// The `j`-th entry of `Z_g`.
    Covariate(usize),
    /// The cluster size `N_g`.
    Size,
}

impl Feature {
    fn value(self, c: &ClusterRecord) -> Result<f64> {
        match self {
            Feature::Size => Ok(c.size() as f64),
            Feature::Covariate(j) => c.covariates().get(j).copied().ok_or_else(|| {
                Error::Input(format!(
                    "cluster `{}` has {} covariates, feature needs index {j}",
                    c.id(),
                    c.covariates().len()
                ))
            }),
        }
    }
}

/// Feature map per stratum. Strata without an explicit entry use the default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateDesign {
    default: Vec<Feature>,
    per_stratum: BTreeMap<String, Vec<Feature>>,
}

impl CovariateDesign {
    /// Constant-only regressions in every cell.
    pub fn intercept_only() -> Self {
        Self::default()
    }

    pub fn uniform(features: Vec<Feature>) -> Self {
        Self {
            default: features,
            per_stratum: BTreeMap::new(),
        }
    }

    pub fn with_stratum(mut self, stratum: impl Into<String>, features: Vec<Feature>) -> Self {
        self.per_stratum.insert(stratum.into(), features);
        self
    }

    pub fn features(&self, stratum: &str) -> &[Feature] {
        self.per_stratum.get(stratum).unwrap_or(&self.default)
    }
}

struct StratumFit {
    members: Vec<usize>,
    pi_hat: f64,
    /// fitted values `(eta_0, eta_1)` for each member, in `members` order
    eta: Vec<[f64; 2]>,
}

fn fit_stratum(
    sample: &ExperimentSample,
    stratum: &str,
    members: Vec<usize>,
    features: &[Feature],
    v: &[f64],
) -> Result<StratumFit> {
    let clusters = sample.clusters();
    let d = features.len();
    let rows: Vec<Vec<f64>> = members
        .iter()
        .map(|&g| {
            let mut r = vec![1.0];
            for f in features {
                r.push(f.value(&clusters[g])?);
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let mut beta = [Vec::new(), Vec::new()];
    let mut counts = [0usize; 2];
    for arm in Arm::BOTH {
        let cell: Vec<usize> = (0..members.len())
            .filter(|&i| clusters[members[i]].arm() == arm)
            .collect();
        counts[arm.index()] = cell.len();
        if cell.is_empty() {
            return Err(Error::EmptyCell {
                stratum: Some(stratum.to_string()),
                arm: Some(arm),
            });
        }
        let context = || format!("stratum `{stratum}`, {arm} arm");
        if cell.len() < d + 2 {
            return Err(Error::RankDeficient {
                context: format!("{}: {} clusters for {} features", context(), cell.len(), d),
            });
        }
        let columns: Vec<Vec<f64>> = (0..=d).map(|j| cell.iter().map(|&i| rows[i][j]).collect()).collect();
        let y: Vec<f64> = cell.iter().map(|&i| v[members[i]]).collect();
        beta[arm.index()] =
            least_squares(&columns, &y, RANK_TOLERANCE).ok_or_else(|| Error::RankDeficient { context: context() })?;
    }
    let eta = rows
        .iter()
        .map(|r| {
            let fit = |b: &[f64]| r.iter().zip(b).map(|(x, c)| x * c).sum::<f64>();
            [fit(&beta[0]), fit(&beta[1])]
        })
        .collect();
    Ok(StratumFit {
        pi_hat: counts[1] as f64 / members.len() as f64,
        members,
        eta,
    })
}

/// Covariate-adjusted estimate and variance for `Theta1` or `Theta2`.
pub fn adjusted_estimate(
    sample: &ExperimentSample,
    target: Target,
    design: &CovariateDesign,
    alpha: f64,
) -> Result<EstimateReport> {
    let clusters = sample.clusters();
    let (v, nu): (Vec<f64>, Vec<f64>) = match target {
        Target::Theta1 => clusters.iter().map(|c| (c.mean(), 1.0)).unzip(),
        Target::Theta2 => clusters.iter().map(|c| (c.size() as f64 * c.mean(), c.size() as f64)).unzip(),
        other => {
            return Err(Error::Domain(format!(
                "covariate adjustment supports theta1 and theta2, not {other}"
            )))
        }
    };
    let g = sample.g() as f64;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); sample.strata().len()];
    for i in 0..clusters.len() {
        members[sample.stratum_index(i)].push(i);
    }
    let fits: Vec<StratumFit> = sample
        .strata()
        .iter()
        .zip(members)
        .map(|(s, m)| fit_stratum(sample, s, m, design.features(s), &v))
        .collect::<Result<_>>()?;

    let mut xi_sum = KahanSum::new();
    for fit in &fits {
        let p = fit.pi_hat;
        for (&gi, eta) in fit.members.iter().zip(&fit.eta) {
            let xi = if clusters[gi].arm().is_treated() {
                (v[gi] - eta[1]) / p
            } else {
                -(v[gi] - eta[0]) / (1.0 - p)
            } + eta[1]
                - eta[0];
            xi_sum.add(xi);
        }
    }
    let theta = match target {
        Target::Theta1 => xi_sum.value() / g,
        _ => xi_sum.value() / ksum(nu.iter().copied()),
    };

    let mut total = KahanSum::new();
    for fit in &fits {
        let p = fit.pi_hat;
        let tilde: Vec<f64> = fit
            .members
            .iter()
            .zip(&fit.eta)
            .map(|(&gi, eta)| {
                if clusters[gi].arm().is_treated() {
                    (1.0 - 1.0 / p) * eta[1] - eta[0] + v[gi] / p
                } else {
                    (1.0 / (1.0 - p) - 1.0) * eta[0] - eta[1] + v[gi] / (1.0 - p)
                }
            })
            .collect();
        let mut tilde_mean = [KahanSum::new(); 2];
        let mut v_mean = [KahanSum::new(); 2];
        let mut n_arm = [0usize; 2];
        for (&gi, t) in fit.members.iter().zip(&tilde) {
            let a = clusters[gi].arm().index();
            tilde_mean[a].add(*t);
            v_mean[a].add(v[gi]);
            n_arm[a] += 1;
        }
        let tilde_mean = [tilde_mean[0].value() / n_arm[0] as f64, tilde_mean[1].value() / n_arm[1] as f64];
        let nu_mean = ksum(fit.members.iter().map(|&gi| nu[gi])) / fit.members.len() as f64;
        let omega2 = v_mean[1].value() / n_arm[1] as f64 - v_mean[0].value() / n_arm[0] as f64 - theta * nu_mean;
        for (&gi, t) in fit.members.iter().zip(&tilde) {
            let a = clusters[gi].arm().index();
            let omega = t - tilde_mean[a] - theta * (nu[gi] - nu_mean);
            total.add(omega * omega + omega2 * omega2);
        }
    }
    let mut variance = total.value() / g;
    if target == Target::Theta2 {
        variance /= sample.mean_size().powi(2);
    }
    if variance < 0.0 {
        return Err(Error::DegenerateVariance {
            value: variance,
            context: "adjusted variance".into(),
        });
    }
    let diagnostics = Diagnostics {
        realized_treated_fraction: sample.treated_fraction(),
        conventional_variance: None,
        decomposition: None,
    };
    EstimateReport::assemble(target, theta, variance, sample.g(), alpha, VarianceKind::Adjusted, diagnostics)
}
