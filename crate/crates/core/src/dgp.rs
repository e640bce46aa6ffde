//! Simulation designs with Beta-Binomial cluster sizes.
//!
//! Cluster sizes are `N = 10(B + 1)` with `B ~ BetaBinomial(a, b, n_supp)`.
//! Potential outcomes are
//! `Y_ig(a) = eta_g(a) Z1 + m_a(Z2) - E[m_a(Z2)] + sigma(a) e_ig` with
//! `eta(0) ~ U[0, 1]`, `eta(1) ~ U[0, 5]`, `sigma(0) = 1`, `sigma(1) = sqrt 2`,
//! `m_1(z) = z` and `m_0(z) = -log(z + 3) 1{z <= 1/2}`. `Z2` is a Beta(2, 2)
//! draw standardized to mean zero and unit variance.
//!
//! Each cluster carries one noise seed per arm; unit `i`'s noise is the
//! `i`-th standard normal draw of that stream. The observed sample is
//! therefore identical whether or not the full potential outcomes are
//! materialized.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::randomization::{assign, subsample_units, MechanismKind, MechanismSpec};
use crate::sample::{cluster_mean, Arm, ClusterRecord, ExperimentSample};
use crate::special::{integrate, ln_beta, ln_gamma};
use crate::variance::PotentialOutcomes;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeDistribution {
    pub a: f64,
    pub b: f64,
    pub n_supp: u64,
}

impl SizeDistribution {
    /// Largest cluster size, `10(n_supp + 1)`.
    pub fn max_size(&self) -> u64 {
        10 * (self.n_supp + 1)
    }

    /// `E[N] = 10(n_supp a / (a + b) + 1)`.
    pub fn mean_size(&self) -> f64 {
        10.0 * (self.n_supp as f64 * self.a / (self.a + self.b) + 1.0)
    }

    /// Support `N = 10(k + 1)` with its probabilities.
    pub fn size_pmf(&self) -> Vec<(u64, f64)> {
        (0..=self.n_supp)
            .map(|k| {
                let p = beta_binomial_pmf(self.a, self.b, self.n_supp, k).expect("validated parameters");
                (10 * (k + 1), p)
            })
            .collect()
    }

    /// Smallest size whose cumulative probability reaches one half.
    pub fn median_size(&self) -> u64 {
        let mut cdf = 0.0;
        for (n, p) in self.size_pmf() {
            cdf += p;
            if cdf >= 0.5 {
                return n;
            }
        }
        self.max_size()
    }

    /// Draws one cluster size.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<u64> {
        let beta = Beta::new(self.a, self.b).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(self.sample(&beta, rng))
    }

    fn sample<R: Rng + ?Sized>(&self, beta: &Beta<f64>, rng: &mut R) -> u64 {
        let p: f64 = beta.sample(rng);
        let b = Binomial::new(self.n_supp, p.clamp(0.0, 1.0))
            .expect("probability clamped to [0, 1]")
            .sample(rng);
        10 * (b + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    /// `Z1 = +/-1` with probability 1/2, independent of size.
    Design1,
    /// `P{Z1 = 1}` is 3/4 for clusters at or above mean size and 1/4 below.
    Design2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingRule {
    /// Every unit sampled.
    Full,
    /// Ten units sampled.
    Fixed10,
    /// `max(10, min(floor(0.4 N), 200))` units sampled.
    CappedFraction,
}

impl SamplingRule {
    pub const GAMMA: f64 = 0.4;

    pub fn sampled(self, size: u64) -> u64 {
        match self {
            SamplingRule::Full => size,
            SamplingRule::Fixed10 => 10.min(size),
            SamplingRule::CappedFraction => {
                let frac = (Self::GAMMA * size as f64).floor() as u64;
                10.max(frac.min(200)).min(size)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CarScheme {
    /// Ten equal-width intervals of the `Z2` support.
    Car1,
    /// Five equal-width `Z2` intervals crossed with a size-median split.
    Car2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub size_dist: SizeDistribution,
    pub design: Design,
    pub sampling_rule: SamplingRule,
    pub car: CarScheme,
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(default = "default_pi")]
    pub pi: f64,
}

fn default_pi() -> f64 {
    0.5
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let sd = &self.size_dist;
        if !(sd.a > 0.0 && sd.b > 0.0 && sd.a.is_finite() && sd.b.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "Beta-Binomial shapes must be positive, got ({}, {})",
                sd.a, sd.b
            )));
        }
        if sd.n_supp < 1 {
            return Err(Error::InvalidConfig("n_supp must be at least 1".into()));
        }
        if self.g < 2 {
            return Err(Error::InvalidConfig(format!("G must be at least 2, got {}", self.g)));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::InvalidConfig(format!("pi must lie in (0, 1), got {}", self.pi)));
        }
        Ok(())
    }

    /// Short human-readable label, e.g. `design2 car1 Bb(10,50) Nmax=500 full G=100`.
    pub fn label(&self) -> String {
        format!(
            "{} {} Bb({},{}) Nmax={} {} G={}",
            design_name(self.design),
            car_name(self.car),
            self.size_dist.a,
            self.size_dist.b,
            self.size_dist.max_size(),
            sampling_name(self.sampling_rule),
            self.g
        )
    }
}

pub(crate) fn design_name(d: Design) -> &'static str {
    match d {
        Design::Design1 => "design1",
        Design::Design2 => "design2",
    }
}

pub(crate) fn car_name(c: CarScheme) -> &'static str {
    match c {
        CarScheme::Car1 => "car1",
        CarScheme::Car2 => "car2",
    }
}

pub(crate) fn sampling_name(s: SamplingRule) -> &'static str {
    match s {
        SamplingRule::Full => "full",
        SamplingRule::Fixed10 => "fixed10",
        SamplingRule::CappedFraction => "capped_fraction",
    }
}

/// Parses a JSON document holding one config or an array of configs.
pub fn parse_configs(json: &str) -> Result<Vec<DgpConfig>> {
    let value: serde_json::Value = serde_json::from_str(json).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        one => vec![one],
    };
    if items.is_empty() {
        return Err(Error::InvalidConfig("no configurations given".into()));
    }
    items
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let c: DgpConfig =
                serde_json::from_value(v).map_err(|e| Error::InvalidConfig(format!("config {i}: {e}")))?;
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// `C(n, k) B(k + a, n - k + b) / B(a, b)`.
pub fn beta_binomial_pmf(a: f64, b: f64, n: u64, k: u64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || n < 1 || k > n {
        return Err(Error::Domain(format!(
            "Beta-Binomial pmf needs a, b > 0, n >= 1, 0 <= k <= n; got a={a}, b={b}, n={n}, k={k}"
        )));
    }
    let (nf, kf) = (n as f64, k as f64);
    let ln_choose = ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0);
    Ok((ln_choose + ln_beta(kf + a, nf - kf + b) - ln_beta(a, b)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueEstimands {
    pub theta1: f64,
    pub theta2: f64,
}

/// Exact equally- and size-weighted effects implied by the design.
pub fn true_estimands(cfg: &DgpConfig) -> TrueEstimands {
    match cfg.design {
        Design::Design1 => TrueEstimands { theta1: 0.0, theta2: 0.0 },
        Design::Design2 => {
            let mean = cfg.size_dist.mean_size();
            let mut theta1 = 0.0;
            let mut theta2 = 0.0;
            for (n, p) in cfg.size_dist.size_pmf() {
                let sign = if n as f64 >= mean { 1.0 } else { -1.0 };
                theta1 += sign * p;
                theta2 += sign * p * n as f64 / mean;
            }
            TrueEstimands { theta1, theta2 }
        }
    }
}

const Z2_SD: f64 = 0.223_606_797_749_978_97; // sqrt(1/20)
const Z2_HALF_WIDTH: f64 = 2.236_067_977_499_79; // sqrt(5)

fn m0(z: f64) -> f64 {
    if z <= 0.5 {
        -(z + 3.0).ln()
    } else {
        0.0
    }
}

fn m0_quadrature(nodes: usize) -> f64 {
    // Z2 <= 1/2 exactly when the Beta(2, 2) draw is at most 1/2 + sqrt(1/20)/2.
    let upper = 0.5 + 0.5 * Z2_SD;
    integrate(|b| m0((b - 0.5) / Z2_SD) * 6.0 * b * (1.0 - b), 0.0, upper, nodes)
}

/// `E[m_0(Z2)]` by 64-node Gauss–Legendre quadrature.
pub fn m0_centering_constant() -> f64 {
    static VALUE: OnceLock<f64> = OnceLock::new();
    *VALUE.get_or_init(|| m0_quadrature(64))
}

fn stratum_label(cfg: &DgpConfig, z2: f64, size: u64, median: u64) -> String {
    let bins = match cfg.car {
        CarScheme::Car1 => 10,
        CarScheme::Car2 => 5,
    };
    let width = 2.0 * Z2_HALF_WIDTH / bins as f64;
    let bin = (((z2 + Z2_HALF_WIDTH) / width).floor().max(0.0) as usize).min(bins - 1);
    match cfg.car {
        CarScheme::Car1 => format!("z{bin}"),
        CarScheme::Car2 => format!("z{bin}_{}", if size >= median { "big" } else { "small" }),
    }
}

/// One observed unit, in the CSV layout read by [`crate::data`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRow {
    pub cluster_id: String,
    pub unit_id: u64,
    pub outcome: f64,
    pub arm: u8,
    pub stratum: String,
    pub cluster_size: u64,
    pub z1: f64,
    pub z2: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Keep one [`UnitRow`] per sampled unit.
    pub keep_rows: bool,
    /// Materialize both potential outcomes for every unit.
    pub oracle: bool,
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub sample: ExperimentSample,
    pub rows: Option<Vec<UnitRow>>,
    pub potential: Option<Vec<PotentialOutcomes>>,
}

struct Latent {
    size: u64,
    z1: f64,
    z2: f64,
    eta: [f64; 2],
    noise_seed: [u64; 2],
}

impl Latent {
    fn systematic(&self, arm: Arm) -> f64 {
        let shift = match arm {
            Arm::Treated => self.z2,
            Arm::Control => m0(self.z2) - m0_centering_constant(),
        };
        self.eta[arm.index()] * self.z1 + shift
    }

    fn noise_sd(arm: Arm) -> f64 {
        match arm {
            Arm::Treated => std::f64::consts::SQRT_2,
            Arm::Control => 1.0,
        }
    }

    /// Outcomes of units `indices` (ascending, 0-based) under `arm`.
    fn outcomes(&self, arm: Arm, indices: &[u64]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed[arm.index()]);
        let base = self.systematic(arm);
        let sd = Self::noise_sd(arm);
        let mut out = Vec::with_capacity(indices.len());
        let mut next = 0u64;
        for &i in indices {
            while next < i {
                let _: f64 = rng.sample(StandardNormal);
                next += 1;
            }
            let e: f64 = rng.sample(StandardNormal);
            next += 1;
            out.push(base + sd * e);
        }
        out
    }

    fn all_outcomes(&self, arm: Arm) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed[arm.index()]);
        let base = self.systematic(arm);
        let sd = Self::noise_sd(arm);
        (0..self.size)
            .map(|_| base + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Draws one experiment from `cfg`.
pub fn generate_sample<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R, opts: GenerateOptions) -> Result<GeneratedSample> {
    cfg.validate()?;
    let sd = cfg.size_dist;
    let size_beta = Beta::new(sd.a, sd.b).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let z2_beta = Beta::new(2.0, 2.0).expect("valid shapes");
    let mean_size = sd.mean_size();
    let median = match cfg.car {
        CarScheme::Car2 => sd.median_size(),
        CarScheme::Car1 => 0,
    };

    let mut latent = Vec::with_capacity(cfg.g);
    let mut strata = Vec::with_capacity(cfg.g);
    for _ in 0..cfg.g {
        let size = sd.sample(&size_beta, rng);
        let z2 = (z2_beta.sample(rng) - 0.5) / Z2_SD;
        let p_one = match cfg.design {
            Design::Design1 => 0.5,
            Design::Design2 if size as f64 >= mean_size => 0.75,
            Design::Design2 => 0.25,
        };
        let z1 = if rng.random_bool(p_one) { 1.0 } else { -1.0 };
        let eta = [rng.random::<f64>(), 5.0 * rng.random::<f64>()];
        let noise_seed = [rng.random::<u64>(), rng.random::<u64>()];
        strata.push(stratum_label(cfg, z2, size, median));
        latent.push(Latent {
            size,
            z1,
            z2,
            eta,
            noise_seed,
        });
    }

    let mech = MechanismSpec::new(MechanismKind::Sbr, cfg.pi)?;
    let assignment = assign(&mech, &strata, rng)?;

    let mut clusters = Vec::with_capacity(cfg.g);
    let mut rows = opts.keep_rows.then(Vec::new);
    for (g, ((lat, stratum), &arm)) in latent.iter().zip(&strata).zip(&assignment.arms).enumerate() {
        let m = cfg.sampling_rule.sampled(lat.size);
        let indices = if m == lat.size {
            (0..m).collect()
        } else {
            subsample_units(lat.size, m, rng)?
        };
        let outcomes = lat.outcomes(arm, &indices);
        let id = format!("c{g:05}");
        if let Some(rows) = rows.as_mut() {
            rows.extend(indices.iter().zip(&outcomes).map(|(&i, &y)| UnitRow {
                cluster_id: id.clone(),
                unit_id: i + 1,
                outcome: y,
                arm: arm.indicator(),
                stratum: stratum.clone(),
                cluster_size: lat.size,
                z1: lat.z1,
                z2: lat.z2,
            }));
        }
        let mean = cluster_mean(&outcomes);
        clusters.push(ClusterRecord::from_aggregates(
            id,
            lat.size,
            m,
            mean,
            vec![lat.z1, lat.z2],
            stratum.clone(),
            arm,
        )?);
    }
    let potential = opts.oracle.then(|| {
        latent
            .iter()
            .map(|lat| PotentialOutcomes {
                treated: lat.all_outcomes(Arm::Treated),
                control: lat.all_outcomes(Arm::Control),
            })
            .collect()
    });
    Ok(GeneratedSample {
        sample: ExperimentSample::new(clusters, cfg.pi, assignment.tau)?,
        rows,
        potential,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(design: Design, sampling_rule: SamplingRule, car: CarScheme, a: f64, b: f64, n_supp: u64, g: usize) -> DgpConfig {
        DgpConfig {
            size_dist: SizeDistribution { a, b, n_supp },
            design,
            sampling_rule,
            car,
            g,
            pi: 0.5,
        }
    }

    #[test]
    fn pmf_examples() {
        for k in 0..=49 {
            assert!((beta_binomial_pmf(1.0, 1.0, 49, k).unwrap() - 0.02).abs() < 1e-14);
            let l = beta_binomial_pmf(0.4, 0.4, 49, k).unwrap();
            let r = beta_binomial_pmf(0.4, 0.4, 49, 49 - k).unwrap();
            assert!((l - r).abs() < 1e-12);
        }
        let mean: f64 = (0..=49).map(|k| k as f64 * beta_binomial_pmf(10.0, 50.0, 49, k).unwrap()).sum();
        assert!((mean - 49.0 * 10.0 / 60.0).abs() < 1e-10);
        assert!(beta_binomial_pmf(1.0, 1.0, 5, 6).is_err());
        assert!(beta_binomial_pmf(0.0, 1.0, 5, 1).is_err());
    }

    #[test]
    fn design1_truths_vanish() {
        let c = cfg(Design::Design1, SamplingRule::Full, CarScheme::Car1, 10.0, 50.0, 49, 100);
        assert_eq!(true_estimands(&c), TrueEstimands { theta1: 0.0, theta2: 0.0 });
    }

    #[test]
    fn sampling_rules() {
        assert_eq!(SamplingRule::CappedFraction.sampled(600), 200);
        assert_eq!(SamplingRule::CappedFraction.sampled(20), 10);
        assert_eq!(SamplingRule::CappedFraction.sampled(100), 40);
        assert_eq!(SamplingRule::Fixed10.sampled(370), 10);
        assert_eq!(SamplingRule::Full.sampled(370), 370);
    }

    #[test]
    fn m0_constant_properties() {
        let c = m0_centering_constant();
        assert!(c < 0.0);
        assert!((m0_quadrature(128) - c).abs() < 1e-12);
    }

    #[test]
    fn car_labels() {
        let c2 = cfg(Design::Design1, SamplingRule::Full, CarScheme::Car2, 1.0, 1.0, 49, 100);
        let mut labels = std::collections::BTreeSet::new();
        for i in 0..=200 {
            let z = -Z2_HALF_WIDTH + 2.0 * Z2_HALF_WIDTH * i as f64 / 200.0;
            labels.insert(stratum_label(&c2, z, 10, 250));
            labels.insert(stratum_label(&c2, z, 500, 250));
        }
        assert_eq!(labels.len(), 10);
        let c1 = DgpConfig { car: CarScheme::Car1, ..c2 };
        assert_eq!(stratum_label(&c1, Z2_HALF_WIDTH, 10, 0), "z9");
        assert_eq!(stratum_label(&c1, -Z2_HALF_WIDTH, 10, 0), "z0");
    }

    #[test]
    fn oracle_and_fast_paths_agree() {
        let c = cfg(Design::Design2, SamplingRule::CappedFraction, CarScheme::Car2, 10.0, 50.0, 49, 40);
        let fast = generate_sample(&c, &mut ChaCha8Rng::seed_from_u64(9), GenerateOptions::default()).unwrap();
        let full = generate_sample(
            &c,
            &mut ChaCha8Rng::seed_from_u64(9),
            GenerateOptions {
                keep_rows: true,
                oracle: true,
            },
        )
        .unwrap();
        assert_eq!(fast.sample, full.sample);
        let pot = full.potential.unwrap();
        for row in full.rows.unwrap() {
            let g: usize = row.cluster_id[1..].parse().unwrap();
            let list = if row.arm == 1 { &pot[g].treated } else { &pot[g].control };
            assert_eq!(list[(row.unit_id - 1) as usize], row.outcome);
        }
    }

    #[test]
    fn config_json_round_trip() {
        let json = r#"{"size_dist":{"a":10,"b":50,"n_supp":49},"design":"design2","sampling_rule":"capped_fraction","car":"car2","G":100}"#;
        let cs = parse_configs(json).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].pi, 0.5);
        let back: DgpConfig = serde_json::from_str(&serde_json::to_string(&cs[0]).unwrap()).unwrap();
        assert_eq!(back, cs[0]);
        assert!(parse_configs(r#"{"size_dist":{"a":1,"b":1,"n_supp":49},"design":"design1","sampling_rule":"full","car":"car1","G":1}"#).is_err());
    }
}
