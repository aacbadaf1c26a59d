use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A state value fell outside the model's admissible state domain.
    #[error("state {value} at index {index:?} is outside the domain of model `{model}`")]
    Domain {
        model: String,
        value: f64,
        index: Option<usize>,
    },

    #[error("transformed drift derivative of order {order} is not finite")]
    NonFiniteDerivative { order: usize },

    /// Shape or precondition mismatch between arguments.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cluster {cluster} carries no affiliation weight")]
    EmptyCluster { cluster: usize },

    #[error("no detail levels left: removing {remove} of {depth} wavelet levels")]
    EmptyEnergy { remove: usize, depth: usize },

    #[error("stationary density of cluster {cluster} is not normalizable on the grid")]
    NonNormalizable { cluster: usize },

    #[error("regression is rank deficient at degree {degree}; try a lower degree")]
    RankDeficient { degree: usize },

    #[error("only {succeeded} of {requested} reference clusterings succeeded for K = {k}")]
    ReferenceFailures {
        k: usize,
        succeeded: usize,
        requested: usize,
    },

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteDerivative { .. }
                | Error::EmptyCluster { .. }
                | Error::EmptyEnergy { .. }
                | Error::NonNormalizable { .. }
                | Error::RankDeficient { .. }
                | Error::ReferenceFailures { .. }
                | Error::Simulation(_)
                | Error::Domain { .. }
        )
    }
}
