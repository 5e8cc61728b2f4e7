use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Ways an on-disk artifact can fail validation.
///
/// Each kind maps to its own numeric code so callers (and scripts wrapping
/// the CLI) can tell them apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    VersionMismatch,
    Truncated,
    ChecksumMismatch,
    Malformed,
}

impl FormatErrorKind {
    pub fn code(self) -> u8 {
        match self {
            FormatErrorKind::BadMagic => 10,
            FormatErrorKind::VersionMismatch => 11,
            FormatErrorKind::Truncated => 12,
            FormatErrorKind::ChecksumMismatch => 13,
            FormatErrorKind::Malformed => 14,
        }
    }
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FormatErrorKind::BadMagic => "bad magic bytes",
            FormatErrorKind::VersionMismatch => "version mismatch",
            FormatErrorKind::Truncated => "truncated file",
            FormatErrorKind::ChecksumMismatch => "checksum mismatch",
            FormatErrorKind::Malformed => "malformed content",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, feasibility).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity appeared in a computed value.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// Gram-Schmidt hit a (numerically) linearly dependent row.
    #[error("degenerate basis: residual norm {residual:e} at row {row} is below tolerance")]
    Degenerate { row: usize, residual: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {kind} ({detail})", path.display())]
    Format {
        path: PathBuf,
        kind: FormatErrorKind,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        kind: FormatErrorKind,
        detail: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            kind,
            detail: detail.into(),
        }
    }
}
