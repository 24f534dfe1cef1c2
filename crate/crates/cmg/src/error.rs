use std::fmt;
use std::io;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// `Config` exits with 2, data problems (`Parse`, `Version`, `Data`, `Io`)
/// with 3, `Diverged` with 4, everything else with 1.
#[derive(Debug)]
pub enum CmgError {
    /// Dimension or index mismatch between operands.
    Shape(String),
    /// Input outside an operation's domain (empty input, zero norm, ...).
    Domain(String),
    /// A numerical routine failed (factorization breakdown, non-finite result).
    Numerical(String),
    /// Invalid configuration value or malformed config file.
    Config(String),
    /// Malformed data file; `offset` is a byte offset for binary files and a
    /// line number for text files.
    Parse { offset: u64, message: String },
    /// File carries an unsupported format version.
    Version { found: u32, supported: u32 },
    /// Training produced a non-finite loss.
    Diverged { stage: &'static str, epoch: usize },
    /// Dataset-level contract violation.
    Data(String),
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, CmgError>;

impl fmt::Display for CmgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmgError::Shape(m) => write!(f, "shape error: {m}"),
            CmgError::Domain(m) => write!(f, "domain error: {m}"),
            CmgError::Numerical(m) => write!(f, "numerical error: {m}"),
            CmgError::Config(m) => write!(f, "config error: {m}"),
            CmgError::Parse { offset, message } => {
                write!(f, "parse error at offset {offset}: {message}")
            }
            CmgError::Version { found, supported } => {
                write!(f, "version error: file version {found}, supported {supported}")
            }
            CmgError::Diverged { stage, epoch } => {
                write!(f, "training diverged in stage '{stage}' at epoch {epoch}")
            }
            CmgError::Data(m) => write!(f, "data error: {m}"),
            CmgError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CmgError {}

impl From<io::Error> for CmgError {
    fn from(e: io::Error) -> Self {
        CmgError::Io(e)
    }
}

impl CmgError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmgError::Config(_) => 2,
            CmgError::Parse { .. } | CmgError::Version { .. } | CmgError::Data(_) | CmgError::Io(_) => 3,
            CmgError::Diverged { .. } => 4,
            _ => 1,
        }
    }
}
