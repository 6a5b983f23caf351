use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("Kron reduction failed: eliminated block is singular (condition estimate {condition:.3e})")]
    Reduction { condition: f64 },

    #[error("simulation diverged at t = {time:.6} s (|state| = {magnitude:.3e})")]
    Divergence { time: f64, magnitude: f64 },

    #[error("algebraic solve failed at t = {time:.6} s after {iterations} iterations (residual {residual:.3e})")]
    AlgebraicSolve {
        time: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("model construction error: {0}")]
    ModelConstruction(String),

    #[error("insufficient prefix: {observed} observed samples, need at least {required}")]
    InsufficientPrefix { observed: usize, required: usize },

    #[error("interval violation: [{from}, {to}] not inside [{start}, {end}]")]
    Interval {
        from: f64,
        to: f64,
        start: f64,
        end: f64,
    },

    #[error("query times must be sorted and inside [0, 1]")]
    UnsortedQueries,

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate feature: summary vector has zero norm")]
    DegenerateFeature,

    #[error("site {0} is not adapted by this bank")]
    UnknownSite(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("format version mismatch: found {found}, expected {expected}")]
    Version { found: String, expected: String },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("malformed CSV in {path} at line {line}: {detail}")]
    Csv {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("checkpoint corrupt: {0}")]
    Checkpoint(String),

    #[error("training aborted at epoch {epoch}: loss became non-finite")]
    NanLoss { epoch: usize },

    #[error("timer resolution too coarse: {0}")]
    TimerResolution(String),

    #[error("scenario {id}: {source}")]
    Scenario {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn staged(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
