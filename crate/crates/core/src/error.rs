use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Validation => 1,
            ErrorClass::Numerical => 2,
            ErrorClass::Io => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("payload size mismatch: header expects {expected} values, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("malformed input ({context}): {message}")]
    Malformed { context: String, message: String },

    #[error("onset {onset} out of range for {scans} scans (condition {condition})")]
    OnsetOutOfRange {
        condition: u32,
        onset: usize,
        scans: usize,
    },

    #[error("unknown category id {0}")]
    UnknownCategory(u32),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("category {0} has no onsets")]
    EmptyCategory(u32),

    #[error("design matrix is rank deficient; collinear columns {columns:?} (condition number {condition:e})")]
    RankDeficient { columns: Vec<usize>, condition: f64 },

    #[error("non-finite time series at voxel {voxel}")]
    NonFiniteSeries { voxel: usize },

    #[error("singular transform")]
    SingularTransform,

    #[error("image is constant; metric {0} needs intensity variance")]
    ConstantImage(&'static str),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("a class is empty; both labels are required")]
    MissingClass,

    #[error("category {category} has {count} instances, at least 2 are required")]
    TooFewInstances { category: u32, count: usize },

    #[error("at least two subjects are required for leave-one-subject-out")]
    SingleSubject,

    #[error("zero-variance vector in correlation ({0})")]
    ZeroVariance(String),

    #[error("synthetic generation infeasible: {0}")]
    Infeasible(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("session {session}, condition {condition}: {source}")]
    Stage {
        session: String,
        condition: u32,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn malformed(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Malformed {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NotFound(_) => "io.not_found",
            Error::Io { .. } => "io.failed",
            Error::SizeMismatch { .. } => "data.size_mismatch",
            Error::NonFinite { .. } => "data.non_finite",
            Error::Malformed { .. } => "data.malformed",
            Error::OnsetOutOfRange { .. } => "data.onset_out_of_range",
            Error::UnknownCategory(_) => "data.unknown_category",
            Error::DimMismatch(_) => "data.dim_mismatch",
            Error::Invalid(_) => "data.invalid",
            Error::EmptyCategory(_) => "design.empty_category",
            Error::RankDeficient { .. } => "glm.rank_deficient",
            Error::NonFiniteSeries { .. } => "glm.non_finite",
            Error::SingularTransform => "register.singular",
            Error::ConstantImage(_) => "register.constant_image",
            Error::EmptyTrainingSet => "tree.empty",
            Error::MissingClass => "boost.missing_class",
            Error::TooFewInstances { .. } => "ecoc.too_few_instances",
            Error::SingleSubject => "eval.single_subject",
            Error::ZeroVariance(_) => "eval.zero_variance",
            Error::Infeasible(_) => "synth.infeasible",
            Error::UnknownKey(_) => "config.unknown_key",
            Error::Stage { source, .. } => source.code(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NotFound(_) | Error::Io { .. } => ErrorClass::Io,
            Error::RankDeficient { .. }
            | Error::NonFiniteSeries { .. }
            | Error::SingularTransform => ErrorClass::Numerical,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }
}
