use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Argument,
    Input,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector: norm {norm:e} is below 1e-12")]
    ZeroVector { norm: f64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("size mismatch: graph has {graph} nodes, score matrix has {rows} rows")]
    SizeMismatch { graph: usize, rows: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: need {needed} bytes, have {available}")]
    TruncatedFile { needed: u64, available: u64 },
    #[error("payload of {requested} bytes exceeds the read cap of {cap} bytes")]
    PayloadTooLarge { requested: u64, cap: u64 },
    #[error("duplicate text with a different embedding: {0:?}")]
    DuplicateText(String),
    #[error("ragged embedding dimensions: line {line} has {found}, expected {expected}")]
    RaggedDimensions { line: usize, expected: usize, found: usize },
    #[error("classifier row {row} has norm {norm}, expected 1")]
    NonUnitRow { row: usize, norm: f64 },
    #[error("prompt text missing from the embedding table: {0:?}")]
    MissingText(String),
    #[error("prompt pool is empty: {0}")]
    EmptyPool(String),
    #[error("invalid prompt template {0:?}: needs exactly one CLASSNAME placeholder")]
    BadTemplate(String),
    #[error("spatial smoothing requested but bag {0:?} has no coordinates")]
    MissingCoords(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("class {class:?} has no ground-truth samples")]
    EmptyClass { class: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("slide {slide_id:?}: {source}")]
    Slide {
        slide_id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier for the variant, with context wrappers peeled off.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroVector { .. } => "ZeroVector",
            Error::NonFinite { .. } => "NonFinite",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::BadMagic { .. } => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::TruncatedFile { .. } => "TruncatedFile",
            Error::PayloadTooLarge { .. } => "PayloadTooLarge",
            Error::DuplicateText(_) => "DuplicateText",
            Error::RaggedDimensions { .. } => "RaggedDimensions",
            Error::NonUnitRow { .. } => "NonUnitRow",
            Error::MissingText(_) => "MissingText",
            Error::EmptyPool(_) => "EmptyPool",
            Error::BadTemplate(_) => "BadTemplate",
            Error::MissingCoords(_) => "MissingCoords",
            Error::Divergence { .. } => "Divergence",
            Error::EmptyClass { .. } => "EmptyClass",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::InvalidData(_) => "InvalidData",
            Error::Slide { source, .. } | Error::File { source, .. } => source.kind(),
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Slide { source, .. } | Error::File { source, .. } => source.class(),
            Error::InvalidArgument(_) | Error::MissingCoords(_) => ErrorClass::Argument,
            Error::ZeroVector { .. } | Error::NonFinite { .. } | Error::Divergence { .. } => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Input,
        }
    }

    /// The innermost error, skipping slide/file context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Slide { source, .. } | Error::File { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn in_slide(self, slide_id: &str) -> Error {
        Error::Slide { slide_id: slide_id.to_owned(), source: Box::new(self) }
    }

    pub fn in_file(self, path: impl Into<PathBuf>) -> Error {
        Error::File { path: path.into(), source: Box::new(self) }
    }
}
