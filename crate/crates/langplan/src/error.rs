//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (world config, grid spec, model config, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Bad argument to an operation (shape mismatch, empty input, bad range, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// A box with non-positive extent where a proper area is required.
    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    /// Region pooling was asked to pool over zero cells.
    #[error("empty region: no grid cells selected")]
    EmptyRegion,

    /// Lane rasterization produced no cells because the element lies off-grid.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// A feature row had (numerically) zero norm and cannot be L2-normalized.
    #[error("degenerate feature: row {row} has norm {norm:.3e} below 1e-12")]
    DegenerateFeature { row: usize, norm: f64 },

    /// Prompt rendering was asked for a field the record does not supply.
    #[error("prompt rendering error: {0}")]
    Rendering(String),

    /// A text-encoder backend failed (unknown id, missing entry, bad file).
    #[error("encoder backend error: {0}")]
    Backend(String),

    /// An embedding cache file belongs to a different backend or dimension.
    #[error("cache backend mismatch: cache has {cached}, encoder is {requested}")]
    CacheMismatch { cached: String, requested: String },

    /// Feature rows and expectation rows do not describe the same entities.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// An experiment was asked to do something its protocol forbids.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    /// Checkpoint or result files that cannot be interpreted.
    #[error("persistence error: {0}")]
    Persistence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}
