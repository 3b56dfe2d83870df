//! Multi-task binary attribute recognition with a graph attention layer.
//!
//! The network splits into a feature learning part (shared convolutional
//! backbone plus per-attribute branches) and a correlation learning part
//! (per-attribute projections whose flattened outputs form graph nodes; a
//! dot-product affinity matrix, row-softmaxed, recombines the nodes).
//! Training routes two cross-entropy losses through disjoint parameter
//! sets: the pre-attention loss updates the feature net, the
//! post-attention loss updates the correlation net, with a stop-gradient
//! at the boundary.
//!
//! Modules:
//! - [`tensor`]: reverse-mode autodiff over dense f64 tensors
//! - [`layers`]: conv / batchnorm / linear / position squeeze-excitation
//! - [`gal`]: node projection, affinity, attention, prior graphs
//! - [`model`]: the assembled network and its tagged parameter registry
//! - [`train`]: losses, LR schedules, the partitioned optimizer, the loop
//! - [`data`]: synthetic planted-correlation datasets and file loaders
//! - [`eval`]: accuracy reports, attention aggregation, heatmap export
//! - [`config`]: flat key-value run configuration files
//! - [`checkpoint`]: bitwise-faithful model serialization

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gal;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use tensor::Tensor;

/// Crate-wide error type; CLI exit codes map from these variants.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
