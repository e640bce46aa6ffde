use thiserror::Error;

use crate::sample::Arm;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A stratum/arm cell required by a formula contains no clusters.
    #[error("no clusters in cell (stratum: {}, arm: {})", .stratum.as_deref().unwrap_or("any"), .arm.map_or("any".to_string(), |a| a.to_string()))]
    EmptyCell {
        stratum: Option<String>,
        arm: Option<Arm>,
    },
    #[error("unknown stratum `{0}`")]
    UnknownStratum(String),
    #[error("no clusters assigned to the {0} arm")]
    EmptyArm(Arm),
    #[error("total cluster size in the {0} arm is zero")]
    ZeroSizeArm(Arm),
    #[error("variance estimate is negative ({value:.6e}) in {context}")]
    DegenerateVariance { value: f64, context: String },
    #[error("cannot draw {m} of {n} units")]
    BadSubsampleSize { n: u64, m: u64 },
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("rank-deficient regression design ({context})")]
    RankDeficient { context: String },
    #[error("enumeration would produce {count} assignments (limit {limit})")]
    TooLarge { count: u128, limit: u128 },
    #[error("invalid cluster record: {0}")]
    InvalidCluster(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("replication {index}: {source}")]
    Replication { index: usize, source: Box<Error> },
    #[error("input error: {0}")]
    Input(String),
}

impl Error {
    /// True for errors caused by malformed input rather than by the data
    /// failing an estimator's preconditions.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Input(_)
                | Error::InvalidCluster(_)
                | Error::InvalidSample(_)
                | Error::InvalidConfig(_)
                | Error::UnknownStratum(_)
        )
    }
}
