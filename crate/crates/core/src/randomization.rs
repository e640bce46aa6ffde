//! Treatment assignment mechanisms and within-cluster subsampling.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::Arm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    /// Stratified block randomization: a fraction `pi` treated in every stratum.
    Sbr,
    /// Independent Bernoulli(`pi`) assignment.
    Bernoulli,
}

impl std::str::FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sbr" => Ok(MechanismKind::Sbr),
            "bernoulli" => Ok(MechanismKind::Bernoulli),
            other => Err(Error::InvalidConfig(format!("unknown mechanism `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    kind: MechanismKind,
    pi: f64,
}

impl MechanismSpec {
    pub fn new(kind: MechanismKind, pi: f64) -> Result<Self> {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::Domain(format!("pi must lie in (0, 1), got {pi}")));
        }
        Ok(Self { kind, pi })
    }

    pub fn kind(&self) -> MechanismKind {
        self.kind
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    /// Limiting dispersion of the within-stratum imbalance.
    pub fn tau(&self) -> f64 {
        match self.kind {
            MechanismKind::Sbr => 0.0,
            MechanismKind::Bernoulli => self.pi * (1.0 - self.pi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub arms: Vec<Arm>,
    pub tau: BTreeMap<String, f64>,
}

/// Splits `pi * n` into its integer part and the probability of one extra
/// treated unit. Values within 1e-9 of an integer are snapped.
pub(crate) fn sbr_count_law(pi: f64, n: usize) -> (usize, f64) {
    let target = pi * n as f64;
    let nearest = target.round();
    if (target - nearest).abs() < 1e-9 {
        return (nearest as usize, 0.0);
    }
    let floor = target.floor();
    (floor as usize, target - floor)
}

/// Assigns arms to clusters whose stratum labels are given in order.
///
/// Strata are processed in sorted label order so the random stream is
/// consumed identically for equal inputs.
pub fn assign<S, R>(mech: &MechanismSpec, strata: &[S], rng: &mut R) -> Result<Assignment>
where
    S: AsRef<str>,
    R: Rng + ?Sized,
{
    if strata.is_empty() {
        return Err(Error::Domain("no clusters to assign".into()));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (g, s) in strata.iter().enumerate() {
        members.entry(s.as_ref()).or_default().push(g);
    }
    let tau = members.keys().map(|s| (s.to_string(), mech.tau())).collect();
    let mut arms = vec![Arm::Control; strata.len()];
    match mech.kind {
        MechanismKind::Bernoulli => {
            for a in arms.iter_mut() {
                if rng.random_bool(mech.pi) {
                    *a = Arm::Treated;
                }
            }
        }
        MechanismKind::Sbr => {
            for idx in members.values() {
                let (base, frac) = sbr_count_law(mech.pi, idx.len());
                let extra = frac > 0.0 && rng.random_bool(frac);
                let treated = base + usize::from(extra);
                let mut pos = idx.clone();
                partial_shuffle(&mut pos, treated, rng);
                for &g in &pos[..treated] {
                    arms[g] = Arm::Treated;
                }
            }
        }
    }
    Ok(Assignment { arms, tau })
}

/// Moves a uniformly random `k`-subset (in random order) to the front.
fn partial_shuffle<T, R: Rng + ?Sized>(v: &mut [T], k: usize, rng: &mut R) {
    let n = v.len();
    for i in 0..k.min(n) {
        let j = rng.random_range(i..n);
        v.swap(i, j);
    }
}

/// Uniformly random `m`-subset of the unit indices `0..n`, sorted ascending.
pub fn subsample_units<R: Rng + ?Sized>(n: u64, m: u64, rng: &mut R) -> Result<Vec<u64>> {
    if m < 1 || m > n {
        return Err(Error::BadSubsampleSize { n, m });
    }
    if m == n {
        return Ok((0..n).collect());
    }
    let mut idx: Vec<u64> = (0..n).collect();
    partial_shuffle(&mut idx, m as usize, rng);
    idx.truncate(m as usize);
    idx.sort_unstable();
    Ok(idx)
}
