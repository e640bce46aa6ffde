//! Brute-force ground truths for small instances: exact estimands of a
//! discrete cluster population, exhaustive enumeration of stratified block
//! assignments, and a normal-equations least-squares solver.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::randomization::sbr_count_law;
use crate::sample::Arm;

/// One support point of a discrete cluster population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationAtom {
    pub probability: f64,
    /// Cluster size `N`.
    pub size: u64,
    /// Treatment effect shared by every unit of the cluster.
    pub effect: f64,
    /// Number of sampled units `|M|`.
    pub sampled: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePopulation {
    atoms: Vec<PopulationAtom>,
}

impl DiscretePopulation {
    pub fn new(atoms: Vec<PopulationAtom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidConfig("population has no atoms".into()));
        }
        for (i, a) in atoms.iter().enumerate() {
            if a.probability.is_nan() || a.probability <= 0.0 || !a.effect.is_finite() {
                return Err(Error::InvalidConfig(format!("atom {i}: probability must be positive")));
            }
            if a.sampled < 1 || a.sampled > a.size {
                return Err(Error::InvalidConfig(format!(
                    "atom {i}: sampled count {} outside [1, {}]",
                    a.sampled, a.size
                )));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.probability).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[PopulationAtom] {
        &self.atoms
    }

    /// Two equally likely school types: big (40 pupils, 10 sampled, effect 1)
    /// and small (10 pupils, 5 sampled, effect -2).
    pub fn schools_example() -> Self {
        Self::new(vec![
            PopulationAtom {
                probability: 0.5,
                size: 40,
                effect: 1.0,
                sampled: 10,
            },
            PopulationAtom {
                probability: 0.5,
                size: 10,
                effect: -2.0,
                sampled: 5,
            },
        ])
        .expect("valid by construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteEstimands {
    /// Equally-weighted effect.
    pub theta1: f64,
    /// Size-weighted effect.
    pub theta2: f64,
    /// Sample-weighted effect.
    pub vartheta: f64,
}

pub fn discrete_estimands(pop: &DiscretePopulation) -> DiscreteEstimands {
    let weighted = |w: &dyn Fn(&PopulationAtom) -> f64| {
        let num: f64 = pop.atoms.iter().map(|a| a.probability * w(a) * a.effect).sum();
        let den: f64 = pop.atoms.iter().map(|a| a.probability * w(a)).sum();
        num / den
    };
    DiscreteEstimands {
        theta1: weighted(&|_| 1.0),
        theta2: weighted(&|a| a.size as f64),
        vartheta: weighted(&|a| a.sampled as f64),
    }
}

pub const ENUMERATION_LIMIT: u128 = 10_000;

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Treated positions within one stratum, with their probabilities.
type StratumLaw = Vec<(Vec<usize>, f64)>;

/// Every arm vector reachable under stratified block randomization with the
/// floor-plus-Bernoulli rounding rule, with its exact probability.
pub fn enumerate_sbr<S: AsRef<str>>(strata: &[S], pi: f64) -> Result<Vec<(Vec<Arm>, f64)>> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Domain(format!("pi must lie in (0, 1), got {pi}")));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (g, s) in strata.iter().enumerate() {
        members.entry(s.as_ref()).or_default().push(g);
    }
    // per stratum: list of (treated positions within the stratum, probability)
    let mut per_stratum: Vec<(&Vec<usize>, StratumLaw)> = Vec::new();
    let mut count: u128 = 1;
    for idx in members.values() {
        let n = idx.len();
        let (base, frac) = sbr_count_law(pi, n);
        let mut laws = vec![(base, 1.0 - frac)];
        if frac > 0.0 {
            laws.push((base + 1, frac));
        }
        let options: u128 = laws.iter().map(|&(k, _)| binomial(n, k)).sum();
        count = count.saturating_mul(options);
        if count > ENUMERATION_LIMIT {
            return Err(Error::TooLarge {
                count,
                limit: ENUMERATION_LIMIT,
            });
        }
        let mut opts = Vec::new();
        for (k, p) in laws {
            let each = p / binomial(n, k) as f64;
            opts.extend(combinations(n, k).into_iter().map(|c| (c, each)));
        }
        per_stratum.push((idx, opts));
    }
    let mut out = vec![(vec![Arm::Control; strata.len()], 1.0)];
    for (idx, opts) in per_stratum {
        let mut next = Vec::with_capacity(out.len() * opts.len());
        for (arms, p) in &out {
            for (treated, q) in &opts {
                let mut a = arms.clone();
                for &t in treated {
                    a[idx[t]] = Arm::Treated;
                }
                next.push((a, p * q));
            }
        }
        out = next;
    }
    Ok(out)
}

/// Least-squares coefficients from the normal equations `X'X b = X'y`,
/// solved by Gaussian elimination with partial pivoting.
pub fn solve_normal_equations(columns: &[Vec<f64>], response: &[f64]) -> Result<Vec<f64>> {
    let p = columns.len();
    if p == 0 || p > 6 {
        return Err(Error::Domain(format!("need between 1 and 6 columns, got {p}")));
    }
    if columns.iter().any(|c| c.len() != response.len()) {
        return Err(Error::Domain("column lengths differ from response length".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut m: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut row: Vec<f64> = (0..p).map(|j| dot(&columns[i], &columns[j])).collect();
            row.push(dot(&columns[i], response));
            row
        })
        .collect();
    let scale = (0..p).map(|i| m[i][i].abs()).fold(0.0, f64::max);
    for k in 0..p {
        let piv = (k..p)
            .max_by(|&a, &b| m[a][k].abs().total_cmp(&m[b][k].abs()))
            .expect("nonempty range");
        if m[piv][k].abs() <= 1e-12 * scale {
            return Err(Error::RankDeficient {
                context: format!("{p}-column normal equations"),
            });
        }
        m.swap(k, piv);
        let (upper, lower) = m.split_at_mut(k + 1);
        let pivot = &upper[k];
        for row in lower.iter_mut() {
            let f = row[k] / pivot[k];
            for (x, y) in row[k..].iter_mut().zip(&pivot[k..]) {
                *x -= f * y;
            }
        }
    }
    let mut coef = vec![0.0; p];
    for k in (0..p).rev() {
        let s = m[k][p] - (k + 1..p).map(|j| m[k][j] * coef[j]).sum::<f64>();
        coef[k] = s / m[k][k];
    }
    Ok(coef)
}
