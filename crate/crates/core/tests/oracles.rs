mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use common::{adjusted_oracle, random_sample};

use crt_infer::adjust::{adjusted_estimate, CovariateDesign, Feature};
use crt_infer::dgp::{
    beta_binomial_pmf, generate_sample, m0_centering_constant, true_estimands, CarScheme, Design, DgpConfig,
    GenerateOptions, SamplingRule, SizeDistribution,
};
use crt_infer::estimators::{estimate_dim, estimate_theta1, estimate_theta2, estimate_theta2_sd};
use crt_infer::inference::normal_quantile;
use crt_infer::oracle::{enumerate_sbr, solve_normal_equations};
use crt_infer::sample::imbalance;
use crt_infer::variance::{cluster_residual_sums, var_cr_theta2, var_hc_theta1};
use crt_infer::{Arm, ClusterRecord, ExperimentSample, Target};

/// Weighted least squares slope on the treatment indicator in a regression
/// on a constant and `A`.
fn wls_slope(s: &ExperimentSample, y: impl Fn(&ClusterRecord) -> f64, w: impl Fn(&ClusterRecord) -> f64) -> f64 {
    let root: Vec<f64> = s.clusters().iter().map(|c| w(c).sqrt()).collect();
    let cols = vec![
        root.clone(),
        s.clusters().iter().zip(&root).map(|(c, r)| r * c.arm().indicator() as f64).collect(),
    ];
    let resp: Vec<f64> = s.clusters().iter().zip(&root).map(|(c, r)| r * y(c)).collect();
    solve_normal_equations(&cols, &resp).unwrap()[1]
}

#[test]
fn estimators_match_their_regression_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let s = random_sample(&mut rng, &[(3, 4), (2, 2), (5, 3)], false);
        let nbar = s.mean_size();
        let pairs = [
            (estimate_theta1(&s).unwrap(), wls_slope(&s, |c| c.mean(), |_| 1.0)),
            (estimate_theta2(&s).unwrap(), wls_slope(&s, |c| c.mean(), |c| c.size() as f64)),
            (estimate_dim(&s).unwrap(), wls_slope(&s, |c| c.mean(), |c| c.sampled() as f64)),
            (
                estimate_theta2_sd(&s).unwrap(),
                wls_slope(&s, |c| c.mean() * c.size() as f64 / nbar, |_| 1.0),
            ),
        ];
        for (k, (a, b)) in pairs.into_iter().enumerate() {
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "form {k}: {a} vs {b}");
        }
    }
}

fn inverse_2x2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

/// `G` times the (A, A) entry of the sandwich `B^-1 M B^-1` with bread
/// `sum w x x'` and meat `sum score^2 x x'`, `x = (1, A)`.
fn sandwich(s: &ExperimentSample, w: impl Fn(&ClusterRecord) -> f64, score: impl Fn(&ClusterRecord) -> f64) -> f64 {
    let mut bread = [[0.0; 2]; 2];
    let mut meat = [[0.0; 2]; 2];
    for c in s.clusters() {
        let x = [1.0, c.arm().indicator() as f64];
        let e = score(c);
        for i in 0..2 {
            for j in 0..2 {
                bread[i][j] += w(c) * x[i] * x[j];
                meat[i][j] += e * e * x[i] * x[j];
            }
        }
    }
    let b = inverse_2x2(bread);
    let mut out = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            out += b[1][i] * meat[i][j] * b[j][1];
        }
    }
    s.g() as f64 * out
}

fn arm_fit(s: &ExperimentSample, arm: Arm, w: impl Fn(&ClusterRecord) -> f64) -> f64 {
    let (num, den) = s
        .clusters()
        .iter()
        .filter(|c| c.arm() == arm)
        .fold((0.0, 0.0), |(n, d), c| (n + w(c) * c.mean(), d + w(c)));
    num / den
}

#[test]
fn conventional_variances_match_sandwich_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let s = random_sample(&mut rng, &[(4, 3), (2, 5)], false);
        let fit1 = [arm_fit(&s, Arm::Control, |_| 1.0), arm_fit(&s, Arm::Treated, |_| 1.0)];
        let hc = sandwich(&s, |_| 1.0, |c| c.mean() - fit1[c.arm().index()]);
        let got = var_hc_theta1(&s).unwrap();
        assert!((got - hc).abs() < 1e-10 * (1.0 + hc), "{got} vs {hc}");

        let size = |c: &ClusterRecord| c.size() as f64;
        let fit2 = [arm_fit(&s, Arm::Control, size), arm_fit(&s, Arm::Treated, size)];
        let cr = sandwich(&s, size, |c| size(c) * (c.mean() - fit2[c.arm().index()]));
        let got = var_cr_theta2(&s, &cluster_residual_sums(&s).unwrap()).unwrap();
        assert!((got - cr).abs() < 1e-10 * (1.0 + cr), "{got} vs {cr}");
    }
}

#[test]
fn enumeration_gives_unbiased_theta1_under_balance() {
    let layouts: [&[&str]; 3] = [
        &["a", "a", "b", "b", "c", "c", "d", "d"],
        &["a", "a", "a", "a", "b", "b", "b", "b"],
        &["x", "y", "x", "y", "x", "y"],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for strata in layouts {
        let potential: Vec<[f64; 2]> = strata
            .iter()
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..4.0)])
            .collect();
        let sizes: Vec<u64> = strata.iter().map(|_| rng.random_range(1..20)).collect();
        let law = enumerate_sbr(strata, 0.5).unwrap();
        let mut mean_estimate = 0.0;
        for (arms, p) in &law {
            let clusters = (0..strata.len())
                .map(|g| {
                    let a = arms[g];
                    ClusterRecord::from_aggregates(g.to_string(), sizes[g], sizes[g], potential[g][a.index()], vec![], strata[g], a)
                        .unwrap()
                })
                .collect();
            let s = ExperimentSample::with_common_tau(clusters, 0.5, 0.0).unwrap();
            mean_estimate += p * estimate_theta1(&s).unwrap();
        }
        let truth = potential.iter().map(|y| y[1] - y[0]).sum::<f64>() / strata.len() as f64;
        assert!((mean_estimate - truth).abs() < 1e-12, "{strata:?}: {mean_estimate} vs {truth}");
    }
}

#[test]
fn adjustment_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let size_only = |c: &ClusterRecord| vec![c.size() as f64];
    let both = |c: &ClusterRecord| vec![c.size() as f64, c.covariates()[0]];
    for k in 0..60 {
        // 8 clusters in one stratum with 4 per arm, or two strata of 3 + 5 and 4 + 4 for two features.
        let s = match k % 3 {
            0 => random_sample(&mut rng, &[(4, 4)], true),
            1 => random_sample(&mut rng, &[(3, 5)], true),
            _ => random_sample(&mut rng, &[(4, 4), (5, 4)], true),
        };
        for target in [Target::Theta1, Target::Theta2] {
            let design = CovariateDesign::uniform(vec![Feature::Size]);
            let (theta, var) = adjusted_oracle(&s, target, size_only);
            let got = adjusted_estimate(&s, target, &design, 0.05).unwrap();
            assert!((got.estimate - theta).abs() < 1e-10 * (1.0 + theta.abs()), "{target}");
            assert!((got.variance - var).abs() < 1e-10 * (1.0 + var), "{target}");

            if k % 3 == 2 {
                let design = CovariateDesign::uniform(vec![Feature::Size, Feature::Covariate(0)]);
                let (theta, var) = adjusted_oracle(&s, target, both);
                let got = adjusted_estimate(&s, target, &design, 0.05).unwrap();
                assert!((got.estimate - theta).abs() < 1e-10 * (1.0 + theta.abs()));
                assert!((got.variance - var).abs() < 1e-10 * (1.0 + var));
            }
        }
    }
}

#[test]
fn per_stratum_designs_use_their_own_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let s = random_sample(&mut rng, &[(4, 4), (4, 4)], true);
    let design = CovariateDesign::intercept_only().with_stratum("s1", vec![Feature::Covariate(0)]);
    let psi = |c: &ClusterRecord| {
        if c.stratum() == "s1" {
            vec![c.covariates()[0]]
        } else {
            vec![]
        }
    };
    let (theta, var) = adjusted_oracle(&s, Target::Theta1, psi);
    let got = adjusted_estimate(&s, Target::Theta1, &design, 0.05).unwrap();
    assert!((got.estimate - theta).abs() < 1e-10 && (got.variance - var).abs() < 1e-10);
}

/// Upper `level` quantile of chi-square with `df` degrees of freedom
/// (Wilson–Hilferty).
fn chi_square_quantile(df: f64, level: f64) -> f64 {
    let z = normal_quantile(level).unwrap();
    let h = 2.0 / (9.0 * df);
    df * (1.0 - h + z * h.sqrt()).powi(3)
}

#[test]
fn drawn_sizes_follow_the_pmf() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let draws = 100_000usize;
    for (a, b) in [(1.0, 1.0), (0.4, 0.4), (10.0, 50.0)] {
        let dist = SizeDistribution { a, b, n_supp: 49 };
        let mut counts = vec![0usize; 50];
        for _ in 0..draws {
            counts[(dist.draw(&mut rng).unwrap() / 10 - 1) as usize] += 1;
        }
        // Pool adjacent cells until each expects at least 5 draws.
        let (mut stat, mut cells) = (0.0, 0usize);
        let (mut obs, mut exp) = (0.0, 0.0);
        for k in 0..50u64 {
            obs += counts[k as usize] as f64;
            exp += draws as f64 * beta_binomial_pmf(a, b, 49, k).unwrap();
            if exp >= 5.0 || k == 49 {
                stat += (obs - exp).powi(2) / exp.max(1e-300);
                cells += 1;
                obs = 0.0;
                exp = 0.0;
            }
        }
        let limit = chi_square_quantile((cells - 1) as f64, 0.999);
        assert!(stat < limit, "Bb({a},{b}): {stat} >= {limit} over {cells} cells");
    }
}

#[test]
fn m0_constant_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let beta = Beta::new(2.0, 2.0).unwrap();
    let sd = (1.0f64 / 20.0).sqrt();
    let n = 10_000_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let z = (beta.sample(&mut rng) - 0.5) / sd;
        let m = if z <= 0.5 { -(z + 3.0).ln() } else { 0.0 };
        sum += m;
        sq += m * m;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    let q = m0_centering_constant();
    assert!(q < 0.0);
    assert!((q - mean).abs() < 3.0 * se, "{q} vs {mean} (se {se})");
}

fn dgp(design: Design, car: CarScheme, rule: SamplingRule, g: usize) -> DgpConfig {
    DgpConfig {
        size_dist: SizeDistribution { a: 1.0, b: 1.0, n_supp: 9 },
        design,
        sampling_rule: rule,
        car,
        g,
        pi: 0.5,
    }
}

#[test]
fn simulated_effects_match_truths() {
    for design in [Design::Design1, Design::Design2] {
        let cfg = dgp(design, CarScheme::Car2, SamplingRule::Fixed10, 100_000);
        let opts = GenerateOptions {
            keep_rows: false,
            oracle: true,
        };
        let out = generate_sample(&cfg, &mut ChaCha8Rng::seed_from_u64(18), opts).unwrap();
        let potential = out.potential.unwrap();
        let effects: Vec<(f64, f64)> = potential
            .iter()
            .map(|p| {
                let d = p.treated.iter().zip(&p.control).map(|(t, c)| t - c).sum::<f64>() / p.size() as f64;
                (p.size() as f64, d)
            })
            .collect();
        let g = effects.len() as f64;
        let theta1 = effects.iter().map(|e| e.1).sum::<f64>() / g;
        let sd1 = (effects.iter().map(|e| (e.1 - theta1).powi(2)).sum::<f64>() / g).sqrt();
        let nbar = effects.iter().map(|e| e.0).sum::<f64>() / g;
        let theta2 = effects.iter().map(|e| e.0 * e.1).sum::<f64>() / (g * nbar);
        let sd2 = (effects.iter().map(|e| (e.0 * (e.1 - theta2)).powi(2)).sum::<f64>() / g).sqrt() / nbar;
        let truth = true_estimands(&cfg);
        assert!((theta1 - truth.theta1).abs() < 3.0 * sd1 / g.sqrt(), "{design:?}: {theta1} vs {}", truth.theta1);
        assert!((theta2 - truth.theta2).abs() < 3.0 * sd2 / g.sqrt(), "{design:?}: {theta2} vs {}", truth.theta2);
    }
}

#[test]
fn generated_samples_respect_design_invariants() {
    let rules = [SamplingRule::Full, SamplingRule::Fixed10, SamplingRule::CappedFraction];
    for seed in 0..20u64 {
        let rule = rules[seed as usize % 3];
        let car = if seed % 2 == 0 { CarScheme::Car1 } else { CarScheme::Car2 };
        let mut cfg = dgp(Design::Design2, car, rule, 300);
        cfg.size_dist = SizeDistribution { a: 0.4, b: 0.4, n_supp: 59 };
        let s = generate_sample(&cfg, &mut ChaCha8Rng::seed_from_u64(seed), GenerateOptions::default())
            .unwrap()
            .sample;
        assert_eq!(s.g(), 300);
        assert!(s.strata().len() <= 10);
        for st in s.strata() {
            assert!(imbalance(&s, st).unwrap().abs() < 1.0);
        }
        for c in s.clusters() {
            assert_eq!(c.sampled(), rule.sampled(c.size()));
            assert!(c.size() % 10 == 0 && c.size() <= 600 && c.sampled() <= c.size());
            assert!(c.mean().is_finite() && c.covariates().len() == 2);
        }
    }
}
