//! Point estimators of the average treatment effect.
//!
//! All four are computed from cluster-level aggregates `(Ybar_g, |M_g|, N_g)`.

use crate::error::{Error, Result};
use crate::sample::{Arm, ExperimentSample, KahanSum};

/// `sum_g w_g Ybar_g 1{A_g = a} / sum_g w_g 1{A_g = a}` for both arms.
fn weighted_arm_means(
    sample: &ExperimentSample,
    weight: impl Fn(&crate::ClusterRecord) -> f64,
) -> Result<[f64; 2]> {
    let mut num = [KahanSum::new(); 2];
    let mut den = [KahanSum::new(); 2];
    let mut count = [0usize; 2];
    for c in sample.clusters() {
        let a = c.arm().index();
        let w = weight(c);
        num[a].add(w * c.mean());
        den[a].add(w);
        count[a] += 1;
    }
    let mut out = [0.0; 2];
    for arm in Arm::BOTH {
        let a = arm.index();
        if count[a] == 0 {
            return Err(Error::EmptyArm(arm));
        }
        let d = den[a].value();
        if d <= 0.0 {
            return Err(Error::ZeroSizeArm(arm));
        }
        out[a] = num[a].value() / d;
    }
    Ok(out)
}

/// Difference in means over individuals: every sampled unit gets equal weight,
/// so clusters are weighted by `|M_g|`.
pub fn estimate_dim(sample: &ExperimentSample) -> Result<f64> {
    let m = weighted_arm_means(sample, |c| c.sampled() as f64)?;
    Ok(m[1] - m[0])
}

/// Difference in the average of cluster means (clusters weighted equally).
pub fn estimate_theta1(sample: &ExperimentSample) -> Result<f64> {
    let m = weighted_arm_means(sample, |_| 1.0)?;
    Ok(m[1] - m[0])
}

/// Difference in the size-weighted average of cluster means.
pub fn estimate_theta2(sample: &ExperimentSample) -> Result<f64> {
    let m = weighted_arm_means(sample, |c| c.size() as f64)?;
    Ok(m[1] - m[0])
}

/// Size-weighted estimator normalised by the overall mean size and treated
/// fraction instead of the arm-specific size totals.
pub fn estimate_theta2_sd(sample: &ExperimentSample) -> Result<f64> {
    let g = sample.g() as f64;
    let abar = sample.treated_fraction();
    if abar <= 0.0 {
        return Err(Error::EmptyArm(Arm::Treated));
    }
    if abar >= 1.0 {
        return Err(Error::EmptyArm(Arm::Control));
    }
    let nbar = sample.mean_size();
    let mut sums = [KahanSum::new(); 2];
    for c in sample.clusters() {
        sums[c.arm().index()].add(c.mean() * c.size() as f64);
    }
    let treated = sums[1].value() / g / (nbar * abar);
    let control = sums[0].value() / g / (nbar * (1.0 - abar));
    Ok(treated - control)
}
