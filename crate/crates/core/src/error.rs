use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("missing required table `{0}`")]
    MissingTable(String),

    #[error("table `{table}` is missing required column `{column}`")]
    MissingColumn { table: String, column: String },

    #[error("table `{table}`: {rejected} of {total} rows rejected, above the {limit_pct}% limit")]
    TooManyRejects {
        table: String,
        rejected: usize,
        total: usize,
        limit_pct: f64,
    },

    #[error("CSV error in {context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("overlapping admission windows for subject {subject_id}: hadm_ids {hadm_ids:?}")]
    OverlappingAdmissions { subject_id: i64, hadm_ids: Vec<i64> },

    #[error("time {time} lies outside admission {hadm_id} [{admittime}, {dischtime}]")]
    OutsideWindow {
        hadm_id: i64,
        time: String,
        admittime: String,
        dischtime: String,
    },

    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },

    #[error("lexicon: {0}")]
    Lexicon(String),

    #[error("path template: {0}")]
    Template(String),

    #[error("embedder: {0}")]
    Embedder(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn unknown(kind: &'static str, value: impl Into<String>) -> Self {
        Error::Unknown {
            kind,
            value: value.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
