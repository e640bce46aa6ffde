//! CSV input and output.
//!
//! Input has one row per sampled individual with columns
//! `cluster_id,unit_id,outcome,arm,stratum,cluster_size` plus any cluster-level
//! covariate columns. `cluster_size` is the true size `N_g` and may exceed the
//! number of rows of the cluster.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use crate::dgp::UnitRow;
use crate::error::{Error, Result};
use crate::randomization::MechanismKind;
use crate::sample::{Arm, ClusterRecord, ExperimentSample};

pub const REQUIRED_COLUMNS: [&str; 5] = ["cluster_id", "unit_id", "outcome", "arm", "stratum"];
pub const SIZE_COLUMN: &str = "cluster_size";

/// Text of the warning emitted when `cluster_size` is absent.
pub const MISSING_SIZE_WARNING: &str = "no cluster_size column: using each cluster's row count as its size; \
size-weighted results then weight clusters by sampled count and estimate the sample-weighted effect, \
which differs from the size-weighted effect unless sampled counts are proportional to true sizes";

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedClusters {
    pub clusters: Vec<ClusterRecord>,
    pub warnings: Vec<String>,
}

struct Pending {
    id: String,
    arm: Arm,
    stratum: String,
    size: Option<u64>,
    covariates: Vec<f64>,
    outcomes: Vec<f64>,
    units: HashSet<String>,
    first_line: u64,
}

fn parse_field<T: std::str::FromStr>(raw: &str, column: &str, line: u64) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Input(format!("line {line}: cannot parse {column} value `{raw}`")))
}

/// Reads individual rows and collapses them to cluster records, in order of
/// first appearance. `covariates` names cluster-level columns to attach.
pub fn read_clusters<R: Read>(input: R, covariates: &[String]) -> Result<LoadedClusters> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::Input(format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = col(name).ok_or_else(|| Error::Input(format!("missing required column `{name}`")))?;
    }
    let size_idx = col(SIZE_COLUMN);
    let cov_idx: Vec<usize> = covariates
        .iter()
        .map(|c| col(c).ok_or_else(|| Error::Input(format!("missing covariate column `{c}`"))))
        .collect::<Result<_>>()?;

    let mut order: Vec<Pending> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no as u64 + 2;
        let record = record.map_err(|e| Error::Input(format!("line {line}: {e}")))?;
        let get = |i: usize| record.get(i).unwrap_or("");
        let id = get(idx[0]).to_string();
        let unit = get(idx[1]).to_string();
        let outcome: f64 = parse_field(get(idx[2]), "outcome", line)?;
        if !outcome.is_finite() {
            return Err(Error::Input(format!("line {line}: outcome must be finite")));
        }
        let arm_raw: u8 = parse_field(get(idx[3]), "arm", line)?;
        let arm = Arm::from_indicator(arm_raw)
            .ok_or_else(|| Error::Input(format!("line {line}: arm must be 0 or 1, got {arm_raw}")))?;
        let stratum = get(idx[4]).to_string();
        let size: Option<u64> = size_idx.map(|i| parse_field(get(i), SIZE_COLUMN, line)).transpose()?;
        let covs: Vec<f64> = cov_idx
            .iter()
            .zip(covariates)
            .map(|(&i, name)| parse_field(get(i), name, line))
            .collect::<Result<_>>()?;

        let slot = *by_id.entry(id.clone()).or_insert_with(|| {
            order.push(Pending {
                id: id.clone(),
                arm,
                stratum: stratum.clone(),
                size,
                covariates: covs.clone(),
                outcomes: Vec::new(),
                units: HashSet::new(),
                first_line: line,
            });
            order.len() - 1
        });
        let p = &mut order[slot];
        let conflict = |what: &str| {
            Error::Input(format!(
                "line {line}: cluster `{id}` has inconsistent {what} (first seen on line {})",
                p.first_line
            ))
        };
        if p.arm != arm {
            return Err(conflict("arm"));
        }
        if p.stratum != stratum {
            return Err(conflict("stratum"));
        }
        if p.size != size {
            return Err(conflict("cluster_size"));
        }
        if p.covariates != covs {
            return Err(conflict("covariates"));
        }
        if !p.units.insert(unit.clone()) {
            return Err(Error::Input(format!("line {line}: duplicate unit `{unit}` in cluster `{id}`")));
        }
        p.outcomes.push(outcome);
        if let Some(n) = p.size {
            if p.outcomes.len() as u64 > n {
                return Err(Error::Input(format!(
                    "line {line}: cluster `{id}` has more rows than its declared size {n}"
                )));
            }
        }
    }
    if order.is_empty() {
        return Err(Error::Input("no data rows".into()));
    }
    let mut warnings = Vec::new();
    if size_idx.is_none() {
        warnings.push(MISSING_SIZE_WARNING.to_string());
    }
    let clusters = order
        .into_iter()
        .map(|p| {
            let size = p.size.unwrap_or(p.outcomes.len() as u64);
            ClusterRecord::new(p.id, size, &p.outcomes, p.covariates, p.stratum, p.arm)
        })
        .collect::<Result<_>>()?;
    Ok(LoadedClusters { clusters, warnings })
}

/// Per-stratum design dispersion, from a mechanism or an explicit table.
#[derive(Debug, Clone, PartialEq)]
pub enum TauSpec {
    Mechanism(MechanismKind),
    Table(BTreeMap<String, f64>),
}

/// Reads a `stratum,tau` table.
pub fn read_tau_table<R: Read>(input: R) -> Result<BTreeMap<String, f64>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Input(e.to_string()))?.clone();
    let s_idx = headers
        .iter()
        .position(|h| h == "stratum")
        .ok_or_else(|| Error::Input("tau file needs a `stratum` column".into()))?;
    let t_idx = headers
        .iter()
        .position(|h| h == "tau")
        .ok_or_else(|| Error::Input("tau file needs a `tau` column".into()))?;
    let mut map = BTreeMap::new();
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no as u64 + 2;
        let record = record.map_err(|e| Error::Input(format!("tau file line {line}: {e}")))?;
        let s = record.get(s_idx).unwrap_or("").to_string();
        let t: f64 = parse_field(record.get(t_idx).unwrap_or(""), "tau", line)?;
        if map.insert(s.clone(), t).is_some() {
            return Err(Error::Input(format!("tau file line {line}: stratum `{s}` listed twice")));
        }
    }
    Ok(map)
}

/// Attaches design metadata to loaded clusters.
pub fn build_sample(clusters: Vec<ClusterRecord>, pi: f64, tau: &TauSpec) -> Result<ExperimentSample> {
    match tau {
        TauSpec::Mechanism(kind) => {
            let t = match kind {
                MechanismKind::Sbr => 0.0,
                MechanismKind::Bernoulli => pi * (1.0 - pi),
            };
            ExperimentSample::with_common_tau(clusters, pi, t)
        }
        TauSpec::Table(map) => ExperimentSample::new(clusters, pi, map.clone()),
    }
}

/// Writes simulated unit rows in the input schema, with `z1,z2` covariates.
pub fn write_unit_rows<W: Write>(rows: &[UnitRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Input(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HAND: &str = "cluster_id,unit_id,outcome,arm,stratum,cluster_size
a,1,2,1,s,1
b,1,4,1,s,3
b,2,5,1,s,3
b,3,6,1,s,3
c,1,1,0,s,1
d,1,2,0,s,3
d,2,3,0,s,3
d,3,4,0,s,3
";

    #[test]
    fn collapses_rows() {
        let got = read_clusters(HAND.as_bytes(), &[]).unwrap();
        assert!(got.warnings.is_empty());
        let c = &got.clusters;
        assert_eq!(c.len(), 4);
        assert_eq!((c[1].id(), c[1].size(), c[1].sampled(), c[1].mean()), ("b", 3, 3, 5.0));
        assert_eq!(c[3].arm(), Arm::Control);
    }

    #[test]
    fn schema_violations() {
        let two_arms = "cluster_id,unit_id,outcome,arm,stratum,cluster_size\na,1,1,1,s,2\na,2,1,0,s,2\n";
        assert!(read_clusters(two_arms.as_bytes(), &[]).unwrap_err().is_input_error());
        let too_many = "cluster_id,unit_id,outcome,arm,stratum,cluster_size\na,1,1,1,s,1\na,2,1,1,s,1\n";
        assert!(read_clusters(too_many.as_bytes(), &[]).unwrap_err().is_input_error());
        let bad_arm = "cluster_id,unit_id,outcome,arm,stratum,cluster_size\na,1,1,2,s,1\n";
        assert!(read_clusters(bad_arm.as_bytes(), &[]).unwrap_err().is_input_error());
        let missing = "cluster_id,unit_id,arm,stratum\na,1,1,s\n";
        assert!(read_clusters(missing.as_bytes(), &[]).unwrap_err().is_input_error());
    }

    #[test]
    fn missing_size_warns() {
        let text = "cluster_id,unit_id,outcome,arm,stratum\na,1,1,1,s\na,2,3,1,s\nb,1,0,0,s\n";
        let got = read_clusters(text.as_bytes(), &[]).unwrap();
        assert_eq!(got.warnings.len(), 1);
        assert_eq!(got.clusters[0].size(), 2);
    }

    #[test]
    fn tau_table_and_sample() {
        let map = read_tau_table("stratum,tau\ns,0.1\n".as_bytes()).unwrap();
        let clusters = read_clusters(HAND.as_bytes(), &[]).unwrap().clusters;
        let s = build_sample(clusters.clone(), 0.5, &TauSpec::Table(map)).unwrap();
        assert_eq!(s.tau("s"), Some(0.1));
        let other = read_tau_table("stratum,tau\nt,0\n".as_bytes()).unwrap();
        assert_eq!(
            build_sample(clusters, 0.5, &TauSpec::Table(other)).unwrap_err(),
            Error::UnknownStratum("s".into())
        );
    }
}
