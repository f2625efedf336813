use thiserror::Error;

use crate::features::FeatureError;
use crate::forest::ForestError;
use crate::metrics::MetricError;
use crate::split::SplitError;
use crate::synth::SynthError;
use crate::trace::TraceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error, one variant per subsystem plus configuration and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("bad input data: {0}")]
    Data(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for bad input data,
    /// 4 for internal invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Synth(SynthError::InvalidSpec(_)) => 2,
            Error::Invariant(_) => 4,
            Error::Split(SplitError::OverlappingWeeks(_) | SplitError::InvalidParams(_)) => 2,
            Error::Metric(MetricError::NOutOfRange { .. } | MetricError::UnknownTiePolicy(_)) => 2,
            Error::Forest(ForestError::InvalidParams(_) | ForestError::UnknownProfile(_)) => 2,
            Error::Feature(FeatureError::UnknownPreset(_)) => 2,
            _ => 3,
        }
    }
}
