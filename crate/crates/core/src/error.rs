use std::io;

use thiserror::Error;

use crate::topology::LinkId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown link {0}")]
    UnknownLink(LinkId),

    #[error("unknown server {0:?}")]
    UnknownServer(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid rate {0} (must be > 0 bytes/s)")]
    InvalidRate(f64),

    #[error("server selection needs at least one candidate")]
    EmptyCandidates,

    #[error("no file name in {0:?}")]
    EmptyFilename(String),

    #[error("no servers configured")]
    NoServers,

    #[error("redirect base {0:?} must end with '/'")]
    InvalidBase(String),

    #[error("manifest unreachable at {url}: {reason}")]
    ManifestUnreachable { url: String, reason: String },

    #[error("segment {name} failed: {reason}")]
    SegmentFailed { name: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("csv parse error at row {row}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Csv {
        row: usize,
        column: Option<usize>,
        message: String,
    },

    #[error("series has no present values")]
    EmptySeries,

    #[error("unknown column {0:?}")]
    UnknownColumn(String),

    #[error("need at least two configurations, got {0}")]
    InsufficientConfigs(usize),

    #[error("http request to {url} failed: {reason}")]
    Http { url: String, reason: String },

    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("activity stopped by shutdown")]
    Shutdown,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the caller supplied something unusable, as opposed to a
    /// failure while running.
    pub fn is_invalid_input(&self) -> bool {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidRate(_)
            | Error::InvalidBase(_)
            | Error::Parse(_)
            | Error::Csv { .. }
            | Error::Json(_)
            | Error::EmptySeries
            | Error::UnknownColumn(_)
            | Error::InsufficientConfigs(_) => true,
            Error::Phase { phase, source } => *phase == "setup" && source.is_invalid_input(),
            _ => false,
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Error {
        match self {
            e @ Error::Phase { .. } => e,
            e => Error::Phase {
                phase,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn http(url: &str, reason: impl ToString) -> Error {
        Error::Http {
            url: url.to_string(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
