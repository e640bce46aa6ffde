//! Oracles shared by the integration test targets.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crt_infer::oracle::solve_normal_equations;
use crt_infer::{Arm, ClusterRecord, ExperimentSample, Target};

/// Random clusters in strata given as `(treated, control)` counts.
pub fn random_sample(rng: &mut ChaCha8Rng, strata: &[(usize, usize)], with_covariate: bool) -> ExperimentSample {
    let mut clusters = Vec::new();
    for (s, &(t, c)) in strata.iter().enumerate() {
        for j in 0..t + c {
            let n = rng.random_range(1..40u64);
            let m = rng.random_range(1..=n);
            let y = rng.random_range(-3.0..3.0) + 0.05 * n as f64;
            let cov = if with_covariate { vec![rng.random_range(-1.0..1.0)] } else { vec![] };
            let arm = if j < t { Arm::Treated } else { Arm::Control };
            clusters.push(
                ClusterRecord::from_aggregates(format!("g{}", clusters.len()), n, m, y, cov, format!("s{s}"), arm)
                    .unwrap(),
            );
        }
    }
    ExperimentSample::with_common_tau(clusters, 0.5, 0.0).unwrap()
}

/// Covariate-adjusted estimate and variance evaluated directly, one stratum
/// at a time.
pub fn adjusted_oracle(s: &ExperimentSample, target: Target, psi: impl Fn(&ClusterRecord) -> Vec<f64>) -> (f64, f64) {
    let cs = s.clusters();
    let g = cs.len() as f64;
    let v = |c: &ClusterRecord| match target {
        Target::Theta1 => c.mean(),
        _ => c.size() as f64 * c.mean(),
    };
    let nu = |c: &ClusterRecord| match target {
        Target::Theta1 => 1.0,
        _ => c.size() as f64,
    };
    let strata = s.strata().to_vec();
    // eta[g] = (eta_0, eta_1), pi_hat per stratum
    let mut eta = vec![[0.0; 2]; cs.len()];
    let mut pi_hat = vec![0.0; cs.len()];
    for st in &strata {
        let members: Vec<usize> = (0..cs.len()).filter(|&i| cs[i].stratum() == st).collect();
        let treated = members.iter().filter(|&&i| cs[i].arm().is_treated()).count();
        for arm in [Arm::Control, Arm::Treated] {
            let cell: Vec<usize> = members.iter().copied().filter(|&i| cs[i].arm() == arm).collect();
            let d = psi(&cs[cell[0]]).len();
            let mut cols = vec![vec![1.0; cell.len()]];
            for j in 0..d {
                cols.push(cell.iter().map(|&i| psi(&cs[i])[j]).collect());
            }
            let resp: Vec<f64> = cell.iter().map(|&i| v(&cs[i])).collect();
            let beta = solve_normal_equations(&cols, &resp).unwrap();
            for &i in &members {
                let x: Vec<f64> = std::iter::once(1.0).chain(psi(&cs[i])).collect();
                eta[i][arm.index()] = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            }
        }
        for &i in &members {
            pi_hat[i] = treated as f64 / members.len() as f64;
        }
    }
    let xi: Vec<f64> = (0..cs.len())
        .map(|i| {
            let a = cs[i].arm().indicator() as f64;
            a * (v(&cs[i]) - eta[i][1]) / pi_hat[i] - (1.0 - a) * (v(&cs[i]) - eta[i][0]) / (1.0 - pi_hat[i])
                + eta[i][1]
                - eta[i][0]
        })
        .collect();
    let theta = match target {
        Target::Theta1 => xi.iter().sum::<f64>() / g,
        _ => xi.iter().sum::<f64>() / cs.iter().map(nu).sum::<f64>(),
    };
    let tilde = |i: usize| {
        let p = pi_hat[i];
        if cs[i].arm().is_treated() {
            (1.0 - 1.0 / p) * eta[i][1] - eta[i][0] + v(&cs[i]) / p
        } else {
            (1.0 / (1.0 - p) - 1.0) * eta[i][0] - eta[i][1] + v(&cs[i]) / (1.0 - p)
        }
    };
    let mut acc = 0.0;
    for i in 0..cs.len() {
        let st = cs[i].stratum();
        let in_s: Vec<usize> = (0..cs.len()).filter(|&j| cs[j].stratum() == st).collect();
        let in_cell: Vec<usize> = in_s.iter().copied().filter(|&j| cs[j].arm() == cs[i].arm()).collect();
        let mean_over = |set: &[usize], f: &dyn Fn(usize) -> f64| set.iter().map(|&j| f(j)).sum::<f64>() / set.len() as f64;
        let nu_bar = mean_over(&in_s, &|j| nu(&cs[j]));
        let omega = tilde(i) - mean_over(&in_cell, &tilde) - theta * (nu(&cs[i]) - nu_bar);
        let treated: Vec<usize> = in_s.iter().copied().filter(|&j| cs[j].arm().is_treated()).collect();
        let control: Vec<usize> = in_s.iter().copied().filter(|&j| !cs[j].arm().is_treated()).collect();
        let omega2 = mean_over(&treated, &|j| v(&cs[j])) - mean_over(&control, &|j| v(&cs[j])) - theta * nu_bar;
        acc += omega * omega + omega2 * omega2;
    }
    let mut var = acc / g;
    if target != Target::Theta1 {
        let nbar = cs.iter().map(nu).sum::<f64>() / g;
        var /= nbar * nbar;
    }
    (theta, var)
}

/// Standard normal distribution function by composite Simpson integration.
pub fn normal_cdf_oracle(z: f64) -> f64 {
    let n = 20_000;
    let h = z / n as f64;
    let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(0.0) + f(z);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    0.5 + s * h / 3.0
}

/// Normal quantile by bisection on [`normal_cdf_oracle`].
pub fn normal_quantile_oracle(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf_oracle(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
