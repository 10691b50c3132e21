use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Variants map one-to-one onto the
/// error categories used across modules; `exit_code` maps them onto the CLI
/// exit statuses.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural precondition (bad label value,
    /// out-of-bounds box, mismatched raster sizes).
    #[error("malformed input: {0}")]
    Malformed(String),

    /// A configuration value is invalid or references something unknown.
    #[error("config error: {0}")]
    Config(String),

    /// A required resource is empty or absent (e.g. sampling an empty pool).
    #[error("unavailable: {0}")]
    Unavailable(String),

    /// A numeric argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An object was used in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// Training produced a non-finite value.
    #[error("training error in parameter `{param}`: {msg}")]
    Training { param: String, msg: String },

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("missing blob: {}", .0.display())]
    MissingBlob(PathBuf),

    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// Output location exists and overwriting was not requested.
    #[error("refusing to overwrite existing output {} (pass --force)", .0.display())]
    Exists(PathBuf),

    /// A verification harness found a tolerance breach.
    #[error("verification failed: {0}")]
    Verification(String),

    /// An internal invariant did not hold.
    #[error("internal invariant breached: {0}")]
    Invariant(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 validation, 2 I/O, 3 verification, 4 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Malformed(_)
            | Error::Config(_)
            | Error::Unavailable(_)
            | Error::Domain(_)
            | Error::State(_)
            | Error::Training { .. }
            | Error::Exists(_) => 1,
            Error::CorruptManifest(_)
            | Error::MissingBlob(_)
            | Error::VersionMismatch { .. }
            | Error::Io { .. }
            | Error::Image { .. } => 2,
            Error::Verification(_) => 3,
            Error::Invariant(_) => 4,
        }
    }
}
