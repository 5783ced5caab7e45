use relgate::rdb::RdbError;
use relgate::schemagraph::GraphError;
use relgate::synth::SynthError;
use relgate::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("round trip changed the database")]
    RoundtripFail,
    #[error("{0}")]
    Divergence(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::InvalidBundle(_) => 3,
            CliError::Incompatible(_) => 4,
            CliError::RoundtripFail => 5,
            CliError::Divergence(_) => 6,
        }
    }
}

impl From<RdbError> for CliError {
    fn from(e: RdbError) -> Self {
        CliError::InvalidBundle(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Rdb(e) => e.into(),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Params(m) => CliError::Usage(m),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            e @ TrainError::Incompatible(_) => CliError::Incompatible(e.to_string()),
            e @ TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Graph(g) => g.into(),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}
