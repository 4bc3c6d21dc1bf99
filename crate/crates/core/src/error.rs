use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("projection did not converge after {iterations} sweeps (max violation {violation:e})")]
    ProjectionDiverged { iterations: usize, violation: f64 },

    #[error("instance too large for exhaustive search: estimated {work} evaluations (limit {limit})")]
    OracleTooLarge { work: f64, limit: f64 },

    #[error("oracle supports at most one small cell per InP, got {0}")]
    OracleShape(usize),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
