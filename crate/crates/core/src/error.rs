use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: header declares {expected} bytes of data, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("row {row} is not normalized (sum of probabilities {sum})")]
    RowNotNormalized { row: usize, sum: f64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown phone {phone:?} at line {line}")]
    UnknownPhone { line: usize, phone: String },

    #[error("duplicate catalog entity {0:?}")]
    DuplicateEntity(String),

    #[error("cannot segment {0:?} with the given vocabulary")]
    Unsegmentable(String),

    #[error("entities cannot be segmented: {0:?}")]
    UnsegmentableEntities(Vec<String>),

    #[error("label id {id} out of range for vocabulary of size {vocab}")]
    LabelOutOfRange { id: usize, vocab: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no word of the hypothesis could be mapped to phones")]
    NoPhones,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Reads a whole file, attaching the path to any I/O error.
pub fn read_file(path: impl AsRef<std::path::Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<std::path::Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: impl AsRef<std::path::Path>, data: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}
