use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate confidence distribution: {0}")]
    DegenerateDistribution(String),

    #[error("probe failed for question {question_id}: {message}")]
    Probe { question_id: String, message: String },

    #[error("endpoint capability error: {0}")]
    Capability(String),

    #[error("{} of {total} probes failed (limit {limit_ratio}): {}", failed_ids.len(), failed_ids.join(", "))]
    ProbeAggregate {
        failed_ids: Vec<String>,
        total: usize,
        limit_ratio: f64,
    },

    #[error("configuration invalid:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at step {step} (last good step: {last_good_step:?})")]
    TrainingFailure {
        step: usize,
        last_good_step: Option<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
