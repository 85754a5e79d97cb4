//! Error type shared across the crate.

use thiserror::Error;

/// Unified error for tensor I/O, configuration validation and numerics.
#[derive(Debug, Error)]
pub enum SalsError {
    /// File does not start with the `SALS` magic bytes.
    #[error("bad magic: expected \"SALS\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    /// Format version byte differs from the one this crate writes.
    #[error("unsupported tensor format version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    /// Only dtype code 0 (f32) is defined.
    #[error("unsupported dtype code {0} (expected 0 = f32)")]
    UnsupportedDtype(u8),

    /// Header declares more payload than the file contains.
    #[error("truncated tensor: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    /// File continues past the declared payload.
    #[error("trailing data after tensor payload: {0} extra bytes")]
    TrailingData(u64),

    /// NaN or infinity encountered on ingestion.
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("unsupported tensor dimensionality {0} (expected 2)")]
    BadNdim(u8),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("invalid input for {context}: {reason}")]
    InvalidInput { context: &'static str, reason: String },

    /// Cache appends must keep positions strictly increasing.
    #[error("position {got} not greater than last cached position {last}")]
    NonMonotonePosition { got: usize, last: usize },

    #[error("token index {index} out of range for cache of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("position {position} outside rotary table range {max_positions}")]
    PositionOutOfRange { position: usize, max_positions: usize },

    #[error("eigensolver failed to converge after {sweeps} sweeps (off-diagonal {off:.3e})")]
    NoConvergence { sweeps: usize, off: f64 },

    #[error("selection is empty")]
    EmptySelection,

    /// Spectrum with zero total mass cannot define a variance rank.
    #[error("degenerate spectrum: total variance is zero")]
    DegenerateSpectrum,

    // Display stays bare; the wrapped error is reachable through
    // `source()`, so chained reporters print the cause exactly once.
    #[error("i/o error")]
    Io(#[from] std::io::Error),

    #[error("json error")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SalsError>;
