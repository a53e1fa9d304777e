use std::path::Path;

/// Failures of the workbench: core contract errors plus file and usage
/// problems. `kind()` is the tag printed as `error[kind]: message`.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] clipladder_core::Error),
    #[error("{0}")]
    Io(String),
    /// Wrong magic, unsupported version or malformed structure.
    #[error("{0}")]
    Format(String),
    /// Truncation or checksum mismatch.
    #[error("{0}")]
    Integrity(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => e.kind(),
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Integrity(_) => "integrity",
            Error::Usage(_) => "usage",
        }
    }

    /// 2 for usage and configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Core(clipladder_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Core(clipladder_core::Error::Config(msg.into()))
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        Error::Io(format!("{}: {e}", path.display()))
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
