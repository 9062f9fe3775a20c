use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileMissing(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite entries: {0}")]
    NonFinite(String),

    #[error("degenerate time axis: need at least {need} snapshots, got {got}")]
    DegenerateTimeAxis { need: usize, got: usize },

    #[error("non-monotone grid axis: {0}")]
    NonMonotoneGrid(String),

    #[error("empty partition: {0}")]
    EmptyPartition(String),

    #[error("too few snapshots: Nt={nt} < n_fft={n_fft}")]
    TooFewSnapshots { nt: usize, n_fft: usize },

    #[error("eigensolve failed to converge after {sweeps} sweeps (n={n})")]
    EigensolveFailure { n: usize, sweeps: usize },

    #[error("frequency band out of range: flb={flb}, fub={fub}, n_freq={n_freq}")]
    BandOutOfRange { flb: usize, fub: usize, n_freq: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("welch parameter mismatch: {0}")]
    ParameterMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("window span too short: span={span}, need n_tauP+n_tauF={need}")]
    SpanTooShort { span: usize, need: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("non-finite activation during forward pass: {0}")]
    NonFiniteActivation(String),

    #[error("config validation: {0}")]
    ConfigValidation(String),

    #[error("provenance mismatch: {stage} expected upstream hash {expected:016x}, found {found:016x}")]
    ProvenanceMismatch {
        stage: String,
        expected: u64,
        found: u64,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
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
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical, 5 provenance.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigValidation(_) | Error::BandOutOfRange { .. } => 2,
            Error::FileMissing(_)
            | Error::ShapeMismatch(_)
            | Error::NonFinite(_)
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::NonMonotoneGrid(_)
            | Error::DegenerateTimeAxis { .. }
            | Error::EmptyPartition(_)
            | Error::TooFewSnapshots { .. }
            | Error::SpanTooShort { .. }
            | Error::IndexOutOfRange(_)
            | Error::DimensionMismatch(_)
            | Error::ParameterMismatch(_) => 3,
            Error::EigensolveFailure { .. }
            | Error::Divergence(_)
            | Error::NonFiniteActivation(_) => 4,
            Error::ProvenanceMismatch { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
