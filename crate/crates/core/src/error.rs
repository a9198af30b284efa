use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("value array has {actual} elements, geometry {dims:?} requires {expected}")]
    LengthMismatch {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },

    #[error("label grid contains non-binary value {value} at linear index {index}")]
    NonBinaryLabel { value: u8, index: usize },

    #[error("index {index} out of bounds on axis {axis} (size {size})")]
    OutOfBounds {
        axis: char,
        index: usize,
        size: usize,
    },

    #[error("empty mask")]
    EmptyMask,

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("stations do not overlap: gap of {gap_mm:.3} mm exceeds one slice ({slice_mm:.3} mm)")]
    NoOverlap { gap_mm: f64, slice_mm: f64 },

    #[error("empty overlap region")]
    EmptyOverlap,

    #[error("cannot trim {n_trim} slices from each end of a station with {nz} slices")]
    TooFewSlices { nz: usize, n_trim: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("need at least {required} paired entries, got {actual}")]
    TooFewEntries { required: usize, actual: usize },

    #[error("duplicate subject id '{0}'")]
    DuplicateSubject(String),

    #[error("subject id sets differ: only in predicted {only_predicted:?}, only in reference {only_reference:?}")]
    SubjectMismatch {
        only_predicted: Vec<String>,
        only_reference: Vec<String>,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("volume format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("config error on line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("phantom spec: {0}")]
    PhantomSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
