//! Variance estimators on the `sqrt(G)` scale.
//!
//! [`var_theta1`] and [`var_theta2`] are consistent under any assignment
//! mechanism whose per-stratum imbalance dispersion `tau(s)` is known; they
//! split into a within-stratum term, an across-stratum heterogeneity term and
//! an assignment term. [`var_hc_theta1`] and [`var_cr_theta2`] are the usual
//! heteroskedasticity- and cluster-robust estimators, which are conservative
//! whenever `tau(s) < pi(1 - pi)` and stratum means differ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{ksum, Arm, ExperimentSample, KahanSum, TransformKind};

/// Components of a consistent variance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub within: f64,
    pub heterogeneity: f64,
    pub assignment: f64,
    pub total: f64,
}

impl VarianceDecomposition {
    pub const ZERO: Self = Self {
        within: 0.0,
        heterogeneity: 0.0,
        assignment: 0.0,
        total: 0.0,
    };
}

/// Stratum/arm cell sums of a per-cluster statistic, centered at the arm mean.
struct CellTable {
    /// arm means over all strata
    arm_mean: [f64; 2],
    /// mean of squared deviations from the arm mean
    arm_dev_sq: [f64; 2],
    /// per stratum: (G(s), [cell mean deviation from arm mean; 2])
    strata: Vec<(usize, [f64; 2])>,
}

impl CellTable {
    fn build(sample: &ExperimentSample, values: &[f64]) -> Result<Self> {
        debug_assert_eq!(values.len(), sample.g());
        let clusters = sample.clusters();
        let mut n = [0usize; 2];
        let mut sum = [KahanSum::new(); 2];
        for (c, &v) in clusters.iter().zip(values) {
            n[c.arm().index()] += 1;
            sum[c.arm().index()].add(v);
        }
        for arm in Arm::BOTH {
            if n[arm.index()] == 0 {
                return Err(Error::EmptyArm(arm));
            }
        }
        let arm_mean = [sum[0].value() / n[0] as f64, sum[1].value() / n[1] as f64];

        let ns = sample.strata().len();
        let mut cell_n = vec![[0usize; 2]; ns];
        let mut cell_dev = vec![[KahanSum::new(); 2]; ns];
        let mut dev_sq = [KahanSum::new(); 2];
        for ((c, &v), &s) in clusters.iter().zip(values).zip(sample.stratum_indices()) {
            let a = c.arm().index();
            let d = v - arm_mean[a];
            cell_n[s][a] += 1;
            cell_dev[s][a].add(d);
            dev_sq[a].add(d * d);
        }
        let mut strata = Vec::with_capacity(ns);
        for (s, (cn, cd)) in cell_n.iter().zip(&cell_dev).enumerate() {
            for arm in Arm::BOTH {
                if cn[arm.index()] == 0 {
                    return Err(Error::EmptyCell {
                        stratum: Some(sample.strata()[s].clone()),
                        arm: Some(arm),
                    });
                }
            }
            strata.push((
                cn[0] + cn[1],
                [cd[0].value() / cn[0] as f64, cd[1].value() / cn[1] as f64],
            ));
        }
        Ok(Self {
            arm_mean,
            arm_dev_sq: [dev_sq[0].value() / n[0] as f64, dev_sq[1].value() / n[1] as f64],
            strata,
        })
    }
}

/// Within/heterogeneity/assignment decomposition of the per-cluster statistic
/// `values` under the sample's design.
///
/// The within term `mean_a(C^2) - sum_s G(s)/G mu_a(s)^2` is evaluated in
/// deviations from the arm mean `mu_a`: with `d_s = mu_a(s) - mu_a` it equals
/// `mean_a((C - mu_a)^2) - 2 mu_a sum_s w_s d_s - sum_s w_s d_s^2`.
pub fn decompose(sample: &ExperimentSample, values: &[f64]) -> Result<VarianceDecomposition> {
    let table = CellTable::build(sample, values)?;
    let pi = sample.pi();
    let g = sample.g() as f64;
    let inv = [1.0 / (1.0 - pi), 1.0 / pi];

    let mut within = [KahanSum::new(); 2];
    let mut weighted_dev = [KahanSum::new(); 2];
    let mut het = KahanSum::new();
    let mut assign = KahanSum::new();
    for (s, &(gs, dev)) in table.strata.iter().enumerate() {
        let w = gs as f64 / g;
        let tau = sample
            .tau(&sample.strata()[s])
            .expect("validated on sample construction");
        for a in 0..2 {
            within[a].add(-w * dev[a] * dev[a]);
            weighted_dev[a].add(w * dev[a]);
        }
        het.add(w * (dev[1] - dev[0]).powi(2));
        assign.add(tau * w * (inv[1] * dev[1] + inv[0] * dev[0]).powi(2));
    }
    let within_arm = |a: usize| {
        table.arm_dev_sq[a] - 2.0 * table.arm_mean[a] * weighted_dev[a].value() + within[a].value()
    };
    let within = inv[1] * within_arm(1) + inv[0] * within_arm(0);
    let heterogeneity = het.value();
    let assignment = assign.value();
    Ok(VarianceDecomposition {
        within,
        heterogeneity,
        assignment,
        total: within + heterogeneity + assignment,
    })
}

fn require_nonnegative(d: VarianceDecomposition, context: &str) -> Result<VarianceDecomposition> {
    if d.total < 0.0 {
        return Err(Error::DegenerateVariance {
            value: d.total,
            context: context.to_string(),
        });
    }
    Ok(d)
}

/// Consistent variance estimator for the equally-weighted estimator.
pub fn var_theta1(sample: &ExperimentSample) -> Result<VarianceDecomposition> {
    let values = sample.transform_values(TransformKind::Mean)?;
    require_nonnegative(decompose(sample, &values)?, "equally-weighted variance")
}

/// Consistent variance estimator for the size-weighted estimator, built on
/// the feasible transform `Yhat_g`.
pub fn var_theta2(sample: &ExperimentSample) -> Result<VarianceDecomposition> {
    let values = sample.transform_values(TransformKind::HatY)?;
    require_nonnegative(decompose(sample, &values)?, "size-weighted variance")
}

/// Consistent variance for the individual-level difference in means, obtained
/// from the size-weighted construction with `|M_g|` in place of `N_g`.
pub fn var_dim(sample: &ExperimentSample) -> Result<VarianceDecomposition> {
    let as_sampled = sample.with_sampled_as_size();
    let values = as_sampled.transform_values(TransformKind::HatY)?;
    require_nonnegative(decompose(&as_sampled, &values)?, "difference-in-means variance")
}

/// Heteroskedasticity-robust variance of the coefficient on treatment in the
/// regression of `Ybar_g` on a constant and `A_g`, on the `sqrt(G)` scale.
pub fn var_hc_theta1(sample: &ExperimentSample) -> Result<f64> {
    let mut total = 0.0;
    for arm in Arm::BOTH {
        let ys: Vec<f64> = sample
            .clusters()
            .iter()
            .filter(|c| c.arm() == arm)
            .map(|c| c.mean())
            .collect();
        if ys.is_empty() {
            return Err(Error::EmptyArm(arm));
        }
        let n = ys.len() as f64;
        let mean = ksum(ys.iter().copied()) / n;
        let var = ksum(ys.iter().map(|y| (y - mean).powi(2))) / n;
        let frac = n / sample.g() as f64;
        total += var / frac;
    }
    Ok(total)
}

/// Per-cluster residual sums `sum_{i in M_g} (Y_ig - c_a)` where `c_a` is the
/// size-weighted mean of the cluster's arm. Only `|M_g|` and `Ybar_g` enter.
pub fn cluster_residual_sums(sample: &ExperimentSample) -> Result<Vec<f64>> {
    let centers = [
        sample.size_weighted_arm_mean(Arm::Control)?,
        sample.size_weighted_arm_mean(Arm::Treated)?,
    ];
    Ok(sample
        .clusters()
        .iter()
        .map(|c| c.sampled() as f64 * (c.mean() - centers[c.arm().index()]))
        .collect())
}

/// Cluster-robust variance of the coefficient on treatment in the regression
/// of individual outcomes on a constant and `A_g` with weights `N_g/|M_g|`,
/// on the `sqrt(G)` scale.
pub fn var_cr_theta2(sample: &ExperimentSample, residual_sums: &[f64]) -> Result<f64> {
    if residual_sums.len() != sample.g() {
        return Err(Error::Domain(format!(
            "{} residual sums for {} clusters",
            residual_sums.len(),
            sample.g()
        )));
    }
    let g = sample.g() as f64;
    let mut size = [KahanSum::new(); 2];
    let mut meat = [KahanSum::new(); 2];
    for (c, &r) in sample.clusters().iter().zip(residual_sums) {
        let a = c.arm().index();
        let n = c.size() as f64;
        size[a].add(n);
        let scaled = n / c.sampled() as f64 * r;
        meat[a].add(scaled * scaled);
    }
    let mut total = 0.0;
    for arm in Arm::BOTH {
        let a = arm.index();
        let bread = size[a].value() / g;
        if bread <= 0.0 {
            return Err(Error::ZeroSizeArm(arm));
        }
        total += meat[a].value() / g / (bread * bread);
    }
    Ok(total)
}

/// Both potential outcomes for every unit of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
}

impl PotentialOutcomes {
    pub fn size(&self) -> usize {
        self.treated.len()
    }
}

/// The two pieces of the finite-population variance: the main term and the
/// subtracted treatment-effect heterogeneity term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinitePopulationVariance {
    pub main: f64,
    pub heterogeneity: f64,
}

impl FinitePopulationVariance {
    pub fn total(&self) -> f64 {
        self.main - self.heterogeneity
    }
}

/// Design-based variance of the size-weighted estimator when every unit is
/// sampled, there is a single stratum and both potential outcomes are known.
pub fn finpop_components(potential: &[PotentialOutcomes], pi: f64) -> Result<FinitePopulationVariance> {
    if potential.is_empty() {
        return Err(Error::Domain("no clusters".into()));
    }
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Domain(format!("pi must lie in (0, 1), got {pi}")));
    }
    for (g, p) in potential.iter().enumerate() {
        if p.treated.len() != p.control.len() || p.treated.is_empty() {
            return Err(Error::Domain(format!(
                "cluster {g}: potential outcome lists must be nonempty and of equal length"
            )));
        }
    }
    let g = potential.len() as f64;
    let n_total: usize = potential.iter().map(PotentialOutcomes::size).sum();
    let n = n_total as f64;
    let mean1 = ksum(potential.iter().flat_map(|p| p.treated.iter().copied())) / n;
    let mean0 = ksum(potential.iter().flat_map(|p| p.control.iter().copied())) / n;
    let mut main = KahanSum::new();
    let mut het = KahanSum::new();
    for p in potential {
        let e1 = ksum(p.treated.iter().map(|y| y - mean1));
        let e0 = ksum(p.control.iter().map(|y| y - mean0));
        main.add(e1 * e1 / pi + e0 * e0 / (1.0 - pi));
        het.add((e1 - e0).powi(2));
    }
    let scale = (g / n).powi(2);
    Ok(FinitePopulationVariance {
        main: scale * main.value() / g,
        heterogeneity: scale * het.value() / g,
    })
}

/// Total finite-population variance; see [`finpop_components`].
pub fn var_finpop_theta2(potential: &[PotentialOutcomes], pi: f64) -> Result<f64> {
    finpop_components(potential, pi).map(|c| c.total())
}
