use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] asor_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing file: {}", .0.display())]
    Missing(PathBuf),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed {what}: {msg}")]
    Format { what: String, msg: String },
    #[error("dataset integrity: {0}")]
    Integrity(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("non-finite loss at step {step} (batch {batch}): {msg}")]
    Numerical { step: u64, batch: String, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn format(what: impl Into<String>, msg: impl ToString) -> Self {
        Error::Format { what: what.into(), msg: msg.to_string() }
    }

    /// Process exit code; each failure class has its own.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Core(asor_core::Error::Config(_)) => 3,
            Error::Missing(_) => 4,
            Error::Io { .. } => 5,
            Error::Format { .. } => 6,
            Error::Provenance(_) => 7,
            Error::Numerical { .. } => 8,
            Error::Core(_) => 9,
            Error::Integrity(_) => 10,
        }
    }
}

/// Reads a whole file, mapping not-found to [`Error::Missing`].
pub fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &std::path::Path, data: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
