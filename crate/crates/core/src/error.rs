use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Io => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("image {width}x{height} is smaller than the {cell_px}px cell")]
    ImageTooSmall {
        width: usize,
        height: usize,
        cell_px: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("insufficient data: {available} features available, {required} required")]
    InsufficientData { available: usize, required: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("patch {patch_h}x{patch_w} does not fit a {rows}x{cols} grid")]
    PatchTooLarge {
        patch_h: usize,
        patch_w: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid stride {0}")]
    InvalidStride(usize),
    #[error("scale {index}: {source}")]
    Scale {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("reference set is empty")]
    EmptyReferenceSet,
    #[error("length mismatch: {left} scores vs {right} weights")]
    LengthMismatch { left: usize, right: usize },
    #[error("fusion weights sum to zero")]
    ZeroWeightSum,
    #[error("invalid fusion weight {0}")]
    InvalidWeight(f64),
    #[error("no patch set for reference {0}")]
    MissingPatchSet(usize),
    #[error("line {line}: timestamp {t} is earlier than the previous event")]
    OutOfOrder { line: usize, t: u64 },
    #[error("line {line}: bad polarity {value:?}")]
    BadPolarity { line: usize, value: String },
    #[error("line {line}: pixel ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        line: usize,
        x: u64,
        y: u64,
        width: usize,
        height: usize,
    },
    #[error("line {line}: {detail}")]
    BadRecord { line: usize, detail: String },
    #[error("event stream is empty")]
    EmptyStream,
    #[error("unknown reconstruction method {0:?}")]
    UnknownMethod(String),
    #[error("no temporal scales given")]
    EmptyScales,
    #[error("distance matrix shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite position for entry {0}")]
    NonFinitePosition(usize),
    #[error("no ground truth for query {0}")]
    MissingGroundTruth(usize),
    #[error("thresholds must be sorted in descending order")]
    UnsortedThresholds,
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::UnknownMethod(_) | Error::EmptyScales => {
                ErrorClass::Config
            }
            Error::Io(_) => ErrorClass::Io,
            Error::Scale { source, .. } | Error::InFile { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }

    /// Attaches the file the error came from.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Error {
        match self {
            nested @ Error::InFile { .. } => nested,
            other => Error::InFile {
                path: path.into(),
                source: Box::new(other),
            },
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn in_file(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn in_file(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| e.in_file(path))
    }
}
