//! Crate-wide error type with an exit-code mapping for the CLI.

use std::path::PathBuf;

use thiserror::Error;

/// Kinds of binary-file corruption, kept distinct so callers can tell a
/// wrong file from a damaged one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    /// Leading magic bytes do not match.
    Magic,
    /// Unsupported format version.
    Version,
    /// Header fields are inconsistent or the file is too short for one.
    Header,
    /// Payload ends before `count * dim` rows.
    TruncatedRows,
    /// CRC32 footer does not match the payload.
    Checksum,
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FormatErrorKind::Magic => "bad magic",
            FormatErrorKind::Version => "unsupported version",
            FormatErrorKind::Header => "corrupt header",
            FormatErrorKind::TruncatedRows => "truncated rows",
            FormatErrorKind::Checksum => "checksum mismatch",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {kind}: {detail}")]
    Format {
        path: PathBuf,
        kind: FormatErrorKind,
        detail: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, kind: FormatErrorKind, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            kind,
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 usage/config, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 2,
            Error::Numeric(_) => 3,
        }
    }

    pub fn format_kind(&self) -> Option<FormatErrorKind> {
        match self {
            Error::Format { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
