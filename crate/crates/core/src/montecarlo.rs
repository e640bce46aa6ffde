//! Parallel, bit-reproducible Monte Carlo replication of the simulation
//! designs.
//!
//! Replication `r` draws from a ChaCha8 stream keyed by the master seed with
//! stream id `r`, so its data never depend on scheduling. Per-replication
//! results are collected in index order and reduced sequentially.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{car_name, design_name, generate_sample, sampling_name, true_estimands, DgpConfig, GenerateOptions};
use crate::error::{Error, Result};
use crate::report::{estimate, Target};
use crate::sample::KahanSum;

/// Random stream for replication `index` under `seed`.
pub fn replication_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Summary of one configuration across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub design: String,
    pub car: String,
    pub sampling_rule: String,
    pub size_a: f64,
    pub size_b: f64,
    pub n_max: u64,
    #[serde(rename = "G")]
    pub g: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub mean_theta1_hat: f64,
    pub mean_theta2_hat: f64,
    pub mean_sigma1_hat: f64,
    pub mean_sigma2_hat: f64,
    pub coverage1: f64,
    pub coverage2: f64,
    /// Replications entering the averages.
    pub replications: usize,
    /// Replications dropped because a stratum lacked one arm.
    pub excluded: usize,
    pub alpha: f64,
    pub seed: u64,
}

struct Replication {
    estimate: [f64; 2],
    sigma: [f64; 2],
    covered: [bool; 2],
}

fn replicate(cfg: &DgpConfig, truth: [f64; 2], alpha: f64, seed: u64, index: usize) -> Result<Option<Replication>> {
    let mut rng = replication_rng(seed, index as u64);
    let attach = |e: Error| Error::Replication {
        index,
        source: Box::new(e),
    };
    let generated = generate_sample(cfg, &mut rng, GenerateOptions::default()).map_err(attach)?;
    let reports = [Target::Theta1, Target::Theta2].map(|t| estimate(&generated.sample, t, alpha));
    let mut out = Replication {
        estimate: [0.0; 2],
        sigma: [0.0; 2],
        covered: [false; 2],
    };
    for (j, r) in reports.into_iter().enumerate() {
        match r {
            Ok(r) => {
                out.estimate[j] = r.estimate;
                out.sigma[j] = r.variance.sqrt();
                out.covered[j] = r.covers(truth[j]);
            }
            Err(Error::EmptyCell { .. }) => return Ok(None),
            Err(e) => return Err(attach(e)),
        }
    }
    Ok(Some(out))
}

/// Runs `reps` replications of `cfg` on `workers` threads.
///
/// The result is identical for every `workers` value.
pub fn run_study(cfg: &DgpConfig, reps: usize, alpha: f64, seed: u64, workers: usize) -> Result<StudyRow> {
    cfg.validate()?;
    if reps < 1 {
        return Err(Error::InvalidConfig("replications must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let truths = true_estimands(cfg);
    let truth = [truths.theta1, truths.theta2];
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<Option<Replication>>> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| replicate(cfg, truth, alpha, seed, r))
            .collect()
    });

    let mut est = [KahanSum::new(); 2];
    let mut sig = [KahanSum::new(); 2];
    let mut cov = [0usize; 2];
    let mut kept = 0usize;
    let mut excluded = 0usize;
    for r in results {
        match r? {
            None => excluded += 1,
            Some(rep) => {
                kept += 1;
                for j in 0..2 {
                    est[j].add(rep.estimate[j]);
                    sig[j].add(rep.sigma[j]);
                    cov[j] += usize::from(rep.covered[j]);
                }
            }
        }
    }
    if kept == 0 {
        return Err(Error::Domain(format!("all {reps} replications were excluded")));
    }
    let k = kept as f64;
    Ok(StudyRow {
        design: design_name(cfg.design).into(),
        car: car_name(cfg.car).into(),
        sampling_rule: sampling_name(cfg.sampling_rule).into(),
        size_a: cfg.size_dist.a,
        size_b: cfg.size_dist.b,
        n_max: cfg.size_dist.max_size(),
        g: cfg.g,
        theta1: truth[0],
        theta2: truth[1],
        mean_theta1_hat: est[0].value() / k,
        mean_theta2_hat: est[1].value() / k,
        mean_sigma1_hat: sig[0].value() / k,
        mean_sigma2_hat: sig[1].value() / k,
        coverage1: cov[0] as f64 / k,
        coverage2: cov[1] as f64 / k,
        replications: kept,
        excluded,
        alpha,
        seed,
    })
}

/// Writes rows as CSV with a header line.
pub fn write_csv<W: Write>(rows: &[StudyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Input(e.to_string()))
}

/// Writes rows as one JSON object per line.
pub fn write_json<W: Write>(rows: &[StudyRow], mut out: W) -> Result<()> {
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::Input(e.to_string()))?;
    }
    Ok(())
}

fn sampling_column(rule: &str) -> &str {
    match rule {
        "full" => "N_g",
        "fixed10" => "10",
        _ => "gamma*N_g",
    }
}

/// Renders rows in the truths / estimates / s.d. / coverage layout, with a
/// heading line whenever the CAR scheme or design changes.
pub fn render_table(rows: &[StudyRow]) -> String {
    let mut s = String::new();
    let mut heading = None;
    for r in rows {
        let h = (r.car.clone(), r.design.clone(), r.g);
        if heading.as_ref() != Some(&h) {
            s.push_str(&format!(
                "{} | {} | G={}\n{:<10} {:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7}\n",
                r.car.to_uppercase(),
                r.design,
                r.g,
                "M_g",
                "N_g",
                "theta1",
                "theta2",
                "est1",
                "est2",
                "sd1",
                "sd2",
                "cov1",
                "cov2"
            ));
            heading = Some(h);
        }
        let size = format!("Bb({},{})/{}", r.size_a, r.size_b, r.n_max);
        s.push_str(&format!(
            "{:<10} {:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>7.4} {:>7.4}\n",
            sampling_column(&r.sampling_rule),
            size,
            r.theta1,
            r.theta2,
            r.mean_theta1_hat,
            r.mean_theta2_hat,
            r.mean_sigma1_hat,
            r.mean_sigma2_hat,
            r.coverage1,
            r.coverage2
        ));
    }
    s
}
