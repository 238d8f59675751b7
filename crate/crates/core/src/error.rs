use std::path::PathBuf;

use thiserror::Error;

use crate::loc::LocId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid traffic model: {0}")]
    InvalidModel(String),

    #[error("unknown location {0}")]
    UnknownLocation(LocId),

    #[error("empty time range: start {start} is after end {end}")]
    EmptyTimeRange { start: u64, end: u64 },

    #[error("unscorable: {0}")]
    Unscorable(&'static str),

    #[error("empty filtered knowledge base: no location has records in the window")]
    NoScorableLocations,

    #[error("record {position} has no location label and cannot enter the knowledge base")]
    UnlabeledRecord { position: usize },

    #[error("record {position} carries a location label and cannot be a user observation")]
    LabeledUserRecord { position: usize },

    #[error("unknown log format {0:?} (expected jsonl or csv)")]
    UnknownFormat(String),

    #[error("input is not valid UTF-8")]
    InvalidUtf8,

    #[error("csv header must be loc_id,bytes,timestamp,peer_net, got {0:?}")]
    BadCsvHeader(String),

    #[error("invalid network prefix {0:?}")]
    InvalidPrefix(String),

    #[error("provider filter needs at least one prefix")]
    EmptyFilter,

    #[error(
        "knowledge base window insufficient: need records over [{needed_from}, {needed_to}], \
         have [{have_from}, {have_to}]"
    )]
    InsufficientKnowledgeBase {
        needed_from: u64,
        needed_to: u64,
        have_from: u64,
        have_to: u64,
    },

    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    #[error("{path}: line {line}: {message}")]
    MalformedLog {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unsupported document version {0}")]
    UnsupportedVersion(u32),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
