use thiserror::Error;

/// Errors raised by the simulation, kernel and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("overlap Gram is not PSD (smallest eigenvalue {min_eigenvalue:.3e})")]
    GramNotPsd { min_eigenvalue: f64 },

    #[error("ambient dimension {n} is smaller than Gram rank {rank}")]
    DimensionTooSmall { n: usize, rank: usize },

    #[error("{name} = {value} is out of range")]
    InvalidRange { name: &'static str, value: f64 },

    #[error("non-finite value at step {step} in block {block}")]
    NonFiniteValue { step: usize, block: &'static str },

    #[error("Schur complement at step {step} is not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite { step: usize, min_eigenvalue: f64 },

    #[error("singular triangular factor at block {step}")]
    SingularFactor { step: usize },

    #[error("Monte-Carlo standard error {stderr:.3e} exceeds cap {cap:.3e}")]
    EstimatorDegenerate { stderr: f64, cap: f64 },

    #[error("DMF iteration did not converge after {iterations} sweeps (residual {residual:.3e})")]
    DmfNotConverged {
        residual: f64,
        iterations: usize,
        last: Box<crate::dmf::DmfSolution>,
    },

    #[error("refinement did not converge after {rounds} rounds (last change {last_change:.3e})")]
    RefinementNotConverged { rounds: usize, last_change: f64 },

    #[error("need at least 2 replications, got {got}")]
    InsufficientReplications { got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse: {0}")]
    Parse(String),

    #[error("{method} replication {replication}: {source}")]
    Annotated {
        method: String,
        replication: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn annotate(self, method: &str, replication: usize) -> Error {
        Error::Annotated {
            method: method.to_string(),
            replication,
            source: Box::new(self),
        }
    }
}
