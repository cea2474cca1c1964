use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not line up (message names the operation and shapes).
    ShapeMismatch(String),
    /// A square matrix was required.
    NonSquare { rows: usize, cols: usize },
    /// Normal equations (or another linear system) are singular.
    ///
    /// Typically caused by an empty encoder bucket producing a zero column in
    /// the one-hot design matrix; refit with `lambda > 0`.
    SingularSystem(String),
    /// A parameter violates its precondition (k > rows, c > d, ...).
    InvalidParam(String),
    /// Input data is degenerate for the requested fit (e.g. zero variance).
    DegenerateData(String),
    /// Training or table optimization produced a non-finite loss.
    NonFiniteLoss { context: String, step: usize },
    /// Attempted to replace a layer that is already a lookup operator.
    LayerAlreadyReplaced(usize),
    Io(std::io::Error),
    /// File does not start with the expected magic bytes.
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    /// Archive was written by an unsupported format version.
    UnsupportedVersion(u32),
    /// Archive contains a section type unknown to this version.
    UnknownSection(u32),
    /// Archive payload does not match its CRC-32 trailer.
    ChecksumMismatch { expected: u32, found: u32 },
    /// File contents do not match the expected SHA-256 digest.
    Sha256Mismatch {
        path: String,
        expected: String,
        found: String,
    },
    /// File ended early; counts are in bytes.
    Truncated { path: String, expected: u64, actual: u64 },
    /// Image and label files disagree on the number of records.
    CountMismatch { images: usize, labels: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonSquare { rows, cols } => {
                write!(f, "square matrix required, got {rows}x{cols}")
            }
            Error::SingularSystem(msg) => write!(f, "singular system: {msg}"),
            Error::InvalidParam(msg) => write!(f, "invalid parameter: {msg}"),
            Error::DegenerateData(msg) => write!(f, "degenerate data: {msg}"),
            Error::NonFiniteLoss { context, step } => {
                write!(f, "non-finite loss in {context} at step {step}")
            }
            Error::LayerAlreadyReplaced(l) => {
                write!(f, "layer {l} is already a lookup operator")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {expected:02x?}, found {found:02x?}"
            ),
            Error::UnsupportedVersion(v) => write!(f, "unsupported archive version {v}"),
            Error::UnknownSection(t) => {
                write!(f, "unknown archive section type {t} (newer format version?)")
            }
            Error::ChecksumMismatch { expected, found } => write!(
                f,
                "checksum mismatch: expected {expected:08x}, found {found:08x}"
            ),
            Error::Sha256Mismatch {
                path,
                expected,
                found,
            } => write!(
                f,
                "sha256 mismatch for {path}: expected {expected}, found {found}"
            ),
            Error::Truncated {
                path,
                expected,
                actual,
            } => write!(
                f,
                "truncated file {path}: expected {expected} bytes, found {actual}"
            ),
            Error::CountMismatch { images, labels } => write!(
                f,
                "record count mismatch: {images} images vs {labels} labels"
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
