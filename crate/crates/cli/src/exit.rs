//! Process exit codes and the mapping from library errors onto them.

use std::fmt;

use xai_class::corpus::CorpusError;
use xai_class::eval::EvalError;
use xai_class::model::ModelError;
use xai_class::oracles::OracleError;
use xai_class::rounds::RoundError;
use xai_class::train::TrainError;

pub const FAILURE: u8 = 1;
pub const CONFIG_INVALID: u8 = 2;
pub const ORACLE_FAILURE: u8 = 3;
pub const EMPTY_DATA: u8 = 4;
pub const ARTIFACT_MISMATCH: u8 = 5;

/// An error tagged with the exit code it should produce.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn new(code: u8, kind: &'static str, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            kind,
            error: error.into(),
        }
    }

    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self::new(CONFIG_INVALID, "InvalidConfig", error)
    }

    pub fn empty(error: impl Into<anyhow::Error>) -> Self {
        Self::new(EMPTY_DATA, "EmptyData", error)
    }

    pub fn io(error: impl Into<anyhow::Error>) -> Self {
        Self::new(FAILURE, "Io", error)
    }

    pub fn context(mut self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        self.error = self.error.context(msg);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:#}", self.kind, self.error)
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => Failure::config(e),
            CorpusError::InvalidLabelSet(_) => Failure::config(e),
            _ => Failure::new(EMPTY_DATA, "MalformedData", e),
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Unavailable(_) => Failure::new(ORACLE_FAILURE, "OracleUnavailable", e),
            OracleError::InvalidConfig(_) | OracleError::TemplateMismatch(_) => Failure::config(e),
            _ => Failure::new(ORACLE_FAILURE, "OracleFailure", e),
        }
    }
}

impl From<RoundError> for Failure {
    fn from(e: RoundError) -> Self {
        match e {
            RoundError::Oracle { .. } => Failure::new(ORACLE_FAILURE, "OracleFailure", e),
            RoundError::TooManyFailures { all_unavailable, .. } => {
                let kind = if all_unavailable {
                    "OracleUnavailable"
                } else {
                    "OracleFailure"
                };
                Failure::new(ORACLE_FAILURE, kind, e)
            }
            RoundError::InvalidConfig(_) => Failure::config(e),
            RoundError::Corpus(c) => c.into(),
            RoundError::Io(_) => Failure::io(e),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ManifestMismatch(_) => Failure::new(ARTIFACT_MISMATCH, "ManifestMismatch", e),
            ModelError::MalformedCheckpoint(_) => Failure::new(ARTIFACT_MISMATCH, "MalformedCheckpoint", e),
            ModelError::InvalidConfig(_) | ModelError::Unsupported(_) => Failure::config(e),
            ModelError::Io(_) => Failure::new(ARTIFACT_MISMATCH, "MissingCheckpoint", e),
            _ => Failure::new(FAILURE, "ModelError", e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyTrainingSet | TrainError::EmptyBatch => Failure::new(EMPTY_DATA, "EmptyTrainingSet", e),
            TrainError::MissingDocument(_) | TrainError::AlignmentFailure(_) => {
                Failure::new(ARTIFACT_MISMATCH, "PseudoLabelMismatch", e)
            }
            TrainError::InvalidConfig(_) => Failure::config(e),
            TrainError::DivergenceDetected { .. } => Failure::new(FAILURE, "DivergenceDetected", e),
            TrainError::Model(m) => m.into(),
            TrainError::Io(_) => Failure::io(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NoGoldLabels => Failure::empty(e),
            EvalError::Model(m) => m.into(),
            _ => Failure::new(FAILURE, "EvalError", e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::io(e)
    }
}
