//! Python bindings for `crt-infer`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use crt_infer::adjust::{adjusted_estimate, CovariateDesign, Feature};
use crt_infer::data::{build_sample, read_clusters, TauSpec};
use crt_infer::dgp::{parse_configs, true_estimands as dgp_truths};
use crt_infer::montecarlo::run_study as mc_run_study;
use crt_infer::oracle::{discrete_estimands as oracle_estimands, DiscretePopulation, PopulationAtom};
use crt_infer::randomization::MechanismKind;
use crt_infer::report::{estimate, estimate_conventional, point_estimate};
use crt_infer::{inference, Arm, ClusterRecord, Error, ExperimentSample, Target};

create_exception!(crt_infer, EstimationError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        EstimationError::new_err(e.to_string())
    }
}

fn parse_target(name: &str) -> PyResult<Target> {
    name.parse().map_err(to_py)
}

fn mechanism(name: &str) -> PyResult<MechanismKind> {
    match name {
        "sbr" => Ok(MechanismKind::Sbr),
        "bernoulli" => Ok(MechanismKind::Bernoulli),
        other => Err(PyValueError::new_err(format!("unknown mechanism `{other}`"))),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[derive(FromPyObject)]
enum TauArg {
    Common(f64),
    Table(BTreeMap<String, f64>),
}

/// Cluster-level sample with design metadata.
#[pyclass(name = "Sample", frozen, module = "crt_infer")]
struct PySample {
    inner: ExperimentSample,
    warnings: Vec<String>,
}

#[pymethods]
impl PySample {
    /// `records` holds `(cluster_id, size, outcomes, stratum, arm)` or
    /// `(cluster_id, size, outcomes, stratum, arm, covariates)` tuples.
    #[new]
    #[pyo3(signature = (records, pi = 0.5, tau = TauArg::Common(0.0)))]
    fn new(records: Vec<Bound<'_, PyAny>>, pi: f64, tau: TauArg) -> PyResult<Self> {
        let mut clusters = Vec::with_capacity(records.len());
        for r in records {
            let (id, size, outcomes, stratum, arm, covariates): (String, u64, Vec<f64>, String, u8, Vec<f64>) =
                match r.extract() {
                    Ok(t) => t,
                    Err(_) => {
                        let (id, size, outcomes, stratum, arm): (String, u64, Vec<f64>, String, u8) = r.extract()?;
                        (id, size, outcomes, stratum, arm, Vec::new())
                    }
                };
            let arm = Arm::from_indicator(arm).ok_or_else(|| PyValueError::new_err("arm must be 0 or 1"))?;
            clusters.push(ClusterRecord::new(id, size, &outcomes, covariates, stratum, arm).map_err(to_py)?);
        }
        let inner = match tau {
            TauArg::Common(t) => ExperimentSample::with_common_tau(clusters, pi, t),
            TauArg::Table(map) => ExperimentSample::new(clusters, pi, map),
        }
        .map_err(to_py)?;
        Ok(Self {
            inner,
            warnings: Vec::new(),
        })
    }

    /// Reads an individual-level CSV.
    #[staticmethod]
    #[pyo3(signature = (path, pi = 0.5, mechanism = "sbr", tau = None, covariates = Vec::new()))]
    fn from_csv(
        path: &str,
        pi: f64,
        mechanism: &str,
        tau: Option<BTreeMap<String, f64>>,
        covariates: Vec<String>,
    ) -> PyResult<Self> {
        let file = File::open(path).map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        let loaded = read_clusters(BufReader::new(file), &covariates).map_err(to_py)?;
        let spec = match tau {
            Some(map) => TauSpec::Table(map),
            None => TauSpec::Mechanism(self::mechanism(mechanism)?),
        };
        let inner = build_sample(loaded.clusters, pi, &spec).map_err(to_py)?;
        Ok(Self {
            inner,
            warnings: loaded.warnings,
        })
    }

    #[getter]
    fn g(&self) -> usize {
        self.inner.g()
    }

    #[getter]
    fn pi(&self) -> f64 {
        self.inner.pi()
    }

    #[getter]
    fn strata(&self) -> Vec<String> {
        self.inner.strata().to_vec()
    }

    #[getter]
    fn treated_fraction(&self) -> f64 {
        self.inner.treated_fraction()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }

    fn point_estimate(&self, target: &str) -> PyResult<f64> {
        point_estimate(&self.inner, parse_target(target)?).map_err(to_py)
    }

    /// Report with the consistent variance estimator, as a dict.
    #[pyo3(signature = (target, alpha = 0.05))]
    fn estimate<'py>(&self, py: Python<'py>, target: &str, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
        let report = estimate(&self.inner, parse_target(target)?, alpha).map_err(to_py)?;
        json_to_py(py, &report)
    }

    /// Report with the HC or cluster-robust variance, as a dict.
    #[pyo3(signature = (target, alpha = 0.05))]
    fn estimate_conventional<'py>(&self, py: Python<'py>, target: &str, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
        let report = estimate_conventional(&self.inner, parse_target(target)?, alpha).map_err(to_py)?;
        json_to_py(py, &report)
    }

    /// Covariate-adjusted report using the listed covariate positions and,
    /// optionally, cluster size.
    #[pyo3(signature = (target, covariates, include_size = false, alpha = 0.05))]
    fn adjusted_estimate<'py>(
        &self,
        py: Python<'py>,
        target: &str,
        covariates: Vec<usize>,
        include_size: bool,
        alpha: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut features: Vec<Feature> = covariates.into_iter().map(Feature::Covariate).collect();
        if include_size {
            features.push(Feature::Size);
        }
        let report = adjusted_estimate(&self.inner, parse_target(target)?, &CovariateDesign::uniform(features), alpha)
            .map_err(to_py)?;
        json_to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(G={}, strata={}, pi={})",
            self.inner.g(),
            self.inner.strata().len(),
            self.inner.pi()
        )
    }
}

#[pyfunction]
fn normal_quantile(p: f64) -> PyResult<f64> {
    inference::normal_quantile(p).map_err(to_py)
}

#[pyfunction]
fn normal_cdf(z: f64) -> f64 {
    inference::normal_cdf(z)
}

#[pyfunction]
fn beta_binomial_pmf(a: f64, b: f64, n: u64, k: u64) -> PyResult<f64> {
    crt_infer::dgp::beta_binomial_pmf(a, b, n, k).map_err(to_py)
}

/// `(theta1, theta2)` for each design in a JSON config (object or array).
#[pyfunction]
fn true_estimands(config_json: &str) -> PyResult<Vec<(f64, f64)>> {
    let configs = parse_configs(config_json).map_err(to_py)?;
    Ok(configs
        .iter()
        .map(|c| {
            let t = dgp_truths(c);
            (t.theta1, t.theta2)
        })
        .collect())
}

/// Monte Carlo summaries, one dict per design.
#[pyfunction]
#[pyo3(signature = (config_json, reps, alpha = 0.05, seed = 1, workers = None))]
fn run_study<'py>(
    py: Python<'py>,
    config_json: &str,
    reps: usize,
    alpha: f64,
    seed: u64,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let configs = parse_configs(config_json).map_err(to_py)?;
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let rows = py
        .detach(|| {
            configs
                .iter()
                .map(|c| mc_run_study(c, reps, alpha, seed, workers))
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(to_py)?;
    json_to_py(py, &rows)
}

/// `(theta1, theta2, vartheta)` of `(probability, size, effect, sampled)` atoms.
#[pyfunction]
fn discrete_estimands(atoms: Vec<(f64, u64, f64, u64)>) -> PyResult<(f64, f64, f64)> {
    let atoms = atoms
        .into_iter()
        .map(|(probability, size, effect, sampled)| PopulationAtom {
            probability,
            size,
            effect,
            sampled,
        })
        .collect();
    let e = oracle_estimands(&DiscretePopulation::new(atoms).map_err(to_py)?);
    Ok((e.theta1, e.theta2, e.vartheta))
}

#[pyfunction]
fn schools_example() -> (f64, f64, f64) {
    let e = oracle_estimands(&DiscretePopulation::schools_example());
    (e.theta1, e.theta2, e.vartheta)
}

#[pymodule]
#[pyo3(name = "crt_infer")]
fn crt_infer_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add("EstimationError", m.py().get_type::<EstimationError>())?;
    m.add_function(wrap_pyfunction!(normal_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(beta_binomial_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(true_estimands, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add_function(wrap_pyfunction!(discrete_estimands, m)?)?;
    m.add_function(wrap_pyfunction!(schools_example, m)?)?;
    Ok(())
}
