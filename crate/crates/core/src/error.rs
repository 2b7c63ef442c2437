use thiserror::Error;

use crate::archive::ArchiveError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes.
    #[error("shape error: {0}")]
    Shape(String),
    /// A parameter outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Archive keys that do not follow the `block{i}.conv.weight` / `block{i}.bn.*` convention.
    #[error("naming convention violation: {0}")]
    Naming(String),
    #[error("layer {layer}: no live filters to copy from (threshold {threshold})")]
    NoLiveFilters { layer: String, threshold: f32 },
    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss = {loss}")]
    Divergence { epoch: usize, iteration: usize, loss: f32 },
    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
