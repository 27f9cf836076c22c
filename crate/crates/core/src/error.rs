use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error{}: {message}", index.map(|i| format!(" (centerline {i})")).unwrap_or_default())]
    Validation {
        index: Option<usize>,
        message: String,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("centerline {id} has {points} points, needs more than {lookahead}")]
    TooShort {
        id: usize,
        points: usize,
        lookahead: usize,
    },

    #[error("no bifurcation found in the left tree")]
    NoBifurcation,

    #[error("no labelable centerline: {0}")]
    NothingLabeled(String),

    #[error("segment {0} does not intersect the volume")]
    OutOfVolume(String),

    #[error("angle {0} outside [0, pi)")]
    InvalidAngle(f64),

    #[error("no segment features to pool")]
    NoSegments,

    #[error("no model outputs to ensemble")]
    NoModels,

    #[error("scorer failed on segment {segment} at angle {angle:.6}: {message}")]
    Scorer {
        segment: String,
        angle: f64,
        message: String,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("phantom spec error: {0}")]
    Spec(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(index: Option<usize>, message: impl Into<String>) -> Self {
        Error::Validation {
            index,
            message: message.into(),
        }
    }

    /// Name of the module that raised the error, for CLI reporting.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse(_) | Error::Validation { .. } => "centerline_model",
            Error::Geometry(_) => "geometry",
            Error::TooShort { .. } | Error::NoBifurcation | Error::NothingLabeled(_) => {
                "heuristic_labeler"
            }
            Error::OutOfVolume(_) | Error::InvalidAngle(_) => "mpr_extractor",
            Error::NoSegments | Error::NoModels | Error::Scorer { .. } => "inference_combiner",
            Error::UndefinedMetric(_) => "metrics",
            Error::Spec(_) => "phantom_gen",
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Parse(_) => "ParseError",
            Error::Validation { .. } => "ValidationError",
            Error::Geometry(_) => "GeometryError",
            Error::TooShort { .. } => "TooShortError",
            Error::NoBifurcation => "NoBifurcationError",
            Error::NothingLabeled(_) => "NothingLabeledError",
            Error::OutOfVolume(_) => "OutOfVolumeError",
            Error::InvalidAngle(_) => "InvalidAngleError",
            Error::NoSegments => "NoSegmentsError",
            Error::NoModels => "NoModelsError",
            Error::Scorer { .. } => "ScorerError",
            Error::UndefinedMetric(_) => "UndefinedMetricError",
            Error::Spec(_) => "SpecError",
        }
    }

    /// Process exit code: 1 validation, 2 I/O, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Parse(_)
            | Error::Validation { .. }
            | Error::TooShort { .. }
            | Error::NoBifurcation
            | Error::NothingLabeled(_)
            | Error::InvalidAngle(_)
            | Error::UndefinedMetric(_)
            | Error::Spec(_) => 1,
            _ => 3,
        }
    }
}
