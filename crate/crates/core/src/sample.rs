//! Cluster-level domain types and the elementary stratum/arm averages that
//! every estimator is assembled from.
//!
//! Individual outcomes are reduced to `(|M_g|, Ybar_g)` when a
//! [`ClusterRecord`] is built, so rows can be streamed and dropped.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment arm of a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub fn from_indicator(a: u8) -> Option<Arm> {
        match a {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treated),
            _ => None,
        }
    }

    pub fn indicator(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_treated(self) -> bool {
        self == Arm::Treated
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Control => "control",
            Arm::Treated => "treated",
        })
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub(crate) fn ksum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<KahanSum>().value()
}

/// One sampled cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    id: String,
    size: u64,
    sampled: u64,
    mean: f64,
    covariates: Vec<f64>,
    stratum: String,
    arm: Arm,
}

impl ClusterRecord {
    /// Builds a record from the sampled individual outcomes. Only their count
    /// and mean are kept.
    pub fn new(
        id: impl Into<String>,
        size: u64,
        outcomes: &[f64],
        covariates: Vec<f64>,
        stratum: impl Into<String>,
        arm: Arm,
    ) -> Result<Self> {
        let id = id.into();
        if outcomes.is_empty() {
            return Err(Error::InvalidCluster(format!("cluster `{id}` has no sampled outcomes")));
        }
        if let Some(bad) = outcomes.iter().find(|y| !y.is_finite()) {
            return Err(Error::InvalidCluster(format!("cluster `{id}` has non-finite outcome {bad}")));
        }
        let mean = cluster_mean(outcomes);
        Self::from_aggregates(id, size, outcomes.len() as u64, mean, covariates, stratum, arm)
    }

    /// Builds a record directly from `(|M_g|, Ybar_g)`.
    pub fn from_aggregates(
        id: impl Into<String>,
        size: u64,
        sampled: u64,
        mean: f64,
        covariates: Vec<f64>,
        stratum: impl Into<String>,
        arm: Arm,
    ) -> Result<Self> {
        let id = id.into();
        if size == 0 {
            return Err(Error::InvalidCluster(format!("cluster `{id}` has size 0")));
        }
        if sampled == 0 || sampled > size {
            return Err(Error::InvalidCluster(format!(
                "cluster `{id}` has {sampled} sampled units but size {size}"
            )));
        }
        if !mean.is_finite() {
            return Err(Error::InvalidCluster(format!("cluster `{id}` has non-finite mean")));
        }
        if covariates.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidCluster(format!("cluster `{id}` has non-finite covariates")));
        }
        Ok(Self {
            id,
            size,
            sampled,
            mean,
            covariates,
            stratum: stratum.into(),
            arm,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// True cluster size `N_g`.
    pub fn size(&self) -> u64 {
        self.size
    }

    /// Number of sampled units `|M_g|`.
    pub fn sampled(&self) -> u64 {
        self.sampled
    }

    /// Mean of the sampled outcomes, `Ybar_g`.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn stratum(&self) -> &str {
        &self.stratum
    }

    pub fn arm(&self) -> Arm {
        self.arm
    }

    /// Copy of this record with a different arm.
    pub fn with_arm(&self, arm: Arm) -> Self {
        Self { arm, ..self.clone() }
    }

    /// Copy of this record with a different outcome mean.
    pub fn with_mean(&self, mean: f64) -> Self {
        Self { mean, ..self.clone() }
    }
}

/// Arithmetic mean of the sampled outcomes of one cluster.
///
/// Panics on an empty slice; [`ClusterRecord`] never holds one.
pub fn cluster_mean(outcomes: &[f64]) -> f64 {
    assert!(!outcomes.is_empty(), "cluster_mean of an empty cluster");
    ksum(outcomes.iter().copied()) / outcomes.len() as f64
}

/// A collection of clusters plus the design metadata (target treated
/// fraction and per-stratum assignment dispersion `tau(s)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSample {
    clusters: Vec<ClusterRecord>,
    pi: f64,
    tau: BTreeMap<String, f64>,
    strata: Vec<String>,
    stratum_of: Vec<usize>,
}

impl ExperimentSample {
    pub fn new(clusters: Vec<ClusterRecord>, pi: f64, tau: BTreeMap<String, f64>) -> Result<Self> {
        if clusters.len() < 2 {
            return Err(Error::InvalidSample(format!(
                "need at least 2 clusters, got {}",
                clusters.len()
            )));
        }
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::InvalidSample(format!("pi must lie in (0, 1), got {pi}")));
        }
        let tau_max = pi * (1.0 - pi);
        for (s, &t) in &tau {
            if !(t >= 0.0 && t <= tau_max * (1.0 + 1e-12)) {
                return Err(Error::InvalidSample(format!(
                    "tau({s}) = {t} outside [0, pi(1-pi)] = [0, {tau_max}]"
                )));
            }
        }
        let strata: Vec<String> = {
            let mut v: Vec<String> = clusters.iter().map(|c| c.stratum.clone()).collect();
            v.sort();
            v.dedup();
            v
        };
        for s in &strata {
            if !tau.contains_key(s) {
                return Err(Error::UnknownStratum(s.clone()));
            }
        }
        let stratum_of = clusters
            .iter()
            .map(|c| strata.binary_search(&c.stratum).expect("stratum collected above"))
            .collect();
        Ok(Self {
            clusters,
            pi,
            tau,
            strata,
            stratum_of,
        })
    }

    /// Builds a sample where every stratum present shares the same `tau`.
    pub fn with_common_tau(clusters: Vec<ClusterRecord>, pi: f64, tau: f64) -> Result<Self> {
        let map = clusters.iter().map(|c| (c.stratum.clone(), tau)).collect();
        Self::new(clusters, pi, map)
    }

    /// Same clusters and design with arms replaced.
    pub fn with_arms(&self, arms: &[Arm]) -> Result<Self> {
        if arms.len() != self.clusters.len() {
            return Err(Error::InvalidSample(format!(
                "{} arms for {} clusters",
                arms.len(),
                self.clusters.len()
            )));
        }
        let mut out = self.clone();
        for (c, &a) in out.clusters.iter_mut().zip(arms) {
            c.arm = a;
        }
        Ok(out)
    }

    /// Same design with every cluster mapped through `f`. Strata must not change.
    pub fn map_clusters(&self, f: impl Fn(&ClusterRecord) -> ClusterRecord) -> Result<Self> {
        Self::new(self.clusters.iter().map(f).collect(), self.pi, self.tau.clone())
    }

    /// Same sample with each cluster's size replaced by its sampled count.
    pub fn with_sampled_as_size(&self) -> Self {
        let mut out = self.clone();
        for c in out.clusters.iter_mut() {
            c.size = c.sampled;
        }
        out
    }

    pub fn clusters(&self) -> &[ClusterRecord] {
        &self.clusters
    }

    /// Number of clusters `G`.
    pub fn g(&self) -> usize {
        self.clusters.len()
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn tau_map(&self) -> &BTreeMap<String, f64> {
        &self.tau
    }

    pub fn tau(&self, stratum: &str) -> Option<f64> {
        self.tau.get(stratum).copied()
    }

    /// Distinct stratum labels present in the sample, sorted.
    pub fn strata(&self) -> &[String] {
        &self.strata
    }

    /// Index into [`Self::strata`] of cluster `g`.
    pub fn stratum_index(&self, g: usize) -> usize {
        self.stratum_of[g]
    }

    pub(crate) fn stratum_indices(&self) -> &[usize] {
        &self.stratum_of
    }

    pub fn arms(&self) -> Vec<Arm> {
        self.clusters.iter().map(|c| c.arm).collect()
    }

    /// Realized fraction of treated clusters.
    pub fn treated_fraction(&self) -> f64 {
        self.count_arm(Arm::Treated) as f64 / self.g() as f64
    }

    pub fn count_arm(&self, arm: Arm) -> usize {
        self.clusters.iter().filter(|c| c.arm == arm).count()
    }

    /// Average true cluster size `Nbar_G`.
    pub fn mean_size(&self) -> f64 {
        ksum(self.clusters.iter().map(|c| c.size as f64)) / self.g() as f64
    }

    /// Per-cluster values of the statistic selected by `t`.
    pub fn transform_values(&self, t: TransformKind) -> Result<Vec<f64>> {
        let simple = |f: fn(&ClusterRecord) -> f64| self.clusters.iter().map(f).collect();
        Ok(match t {
            TransformKind::Mean => simple(|c| c.mean),
            TransformKind::MeanSq => simple(|c| c.mean * c.mean),
            TransformKind::Size => simple(|c| c.size as f64),
            TransformKind::SizeWeighted => simple(|c| c.size as f64 * c.mean),
            TransformKind::HatY => self.hat_y()?,
            TransformKind::HatYSq => self.hat_y()?.into_iter().map(|v| v * v).collect(),
        })
    }

    /// Size-weighted arm mean `sum N Ybar 1{A=a} / sum N 1{A=a}`.
    pub fn size_weighted_arm_mean(&self, arm: Arm) -> Result<f64> {
        let mut num = KahanSum::new();
        let mut den = KahanSum::new();
        let mut any = false;
        for c in self.clusters.iter().filter(|c| c.arm == arm) {
            any = true;
            num.add(c.size as f64 * c.mean);
            den.add(c.size as f64);
        }
        if !any {
            return Err(Error::EmptyArm(arm));
        }
        let den = den.value();
        if den <= 0.0 {
            return Err(Error::ZeroSizeArm(arm));
        }
        Ok(num.value() / den)
    }

    /// Feasible size-weighted transform
    /// `Yhat_g = (N_g / Nbar)(Ybar_g - size-weighted mean of the arm of g)`.
    fn hat_y(&self) -> Result<Vec<f64>> {
        let centers = [
            self.size_weighted_arm_mean(Arm::Control)?,
            self.size_weighted_arm_mean(Arm::Treated)?,
        ];
        let nbar = self.mean_size();
        Ok(self
            .clusters
            .iter()
            .map(|c| c.size as f64 / nbar * (c.mean - centers[c.arm.index()]))
            .collect())
    }
}

/// Selector for the per-cluster statistic `C_g` fed to stratum averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// `Ybar_g`
    Mean,
    /// `Ybar_g^2`
    MeanSq,
    /// `N_g`
    Size,
    /// `N_g Ybar_g`
    SizeWeighted,
    /// `Yhat_g`, the feasible size-weighted transform.
    #[serde(rename = "hat_y")]
    HatY,
    /// `Yhat_g^2`
    #[serde(rename = "hat_y_sq")]
    HatYSq,
}

/// Count and mean of a statistic over a stratum/arm cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub count: usize,
    pub mean: f64,
}

/// Average of the statistic `t` over clusters matching the optional arm and
/// stratum filters. Omitting a filter widens the cell.
pub fn stratum_arm_stats(
    sample: &ExperimentSample,
    t: TransformKind,
    arm: Option<Arm>,
    stratum: Option<&str>,
) -> Result<CellStats> {
    let values = sample.transform_values(t)?;
    let mut sum = KahanSum::new();
    let mut count = 0usize;
    for (c, v) in sample.clusters().iter().zip(values) {
        if arm.is_some_and(|a| a != c.arm) || stratum.is_some_and(|s| s != c.stratum) {
            continue;
        }
        sum.add(v);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyCell {
            stratum: stratum.map(str::to_string),
            arm,
        });
    }
    Ok(CellStats {
        count,
        mean: sum.value() / count as f64,
    })
}

/// Within-stratum imbalance `D_G(s) = sum_g (1{A_g = 1} - pi) 1{S_g = s}`.
pub fn imbalance(sample: &ExperimentSample, stratum: &str) -> Result<f64> {
    if sample.strata().binary_search_by(|s| s.as_str().cmp(stratum)).is_err() {
        return Err(Error::UnknownStratum(stratum.to_string()));
    }
    let pi = sample.pi();
    Ok(ksum(
        sample
            .clusters()
            .iter()
            .filter(|c| c.stratum == stratum)
            .map(|c| c.arm.indicator() as f64 - pi),
    ))
}
