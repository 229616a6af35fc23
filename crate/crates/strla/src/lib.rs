//! End-to-end supervised learning on semantic tree-structured data.
//!
//! Documents expressed in JSON (or a reduced XML) are parsed into a generic
//! semantic-tree data model, a recursive neural network is constructed
//! dynamically for each example mirroring its tree topology, and the whole
//! thing is trained with reverse-mode autodiff — no hand-engineered feature
//! vectors anywhere.
//!
//! Module map:
//! - [`stree`] — the tree data model, JSON parsing, element paths
//! - [`xmltree`] — reduced-XML parsing and the XML tag/attribute embedders
//! - [`autodiff`] — tape-based reverse-mode differentiation
//! - [`params`] — parameter storage keyed by (family, canonical path)
//! - [`embedders`] — primitive/container embedding networks, LSTM cells
//! - [`engine`] — per-example network construction and prediction
//! - [`training`] — loss, Adam, pseudo-minibatching, cross-validation, MLP baseline
//! - [`data`] — tabular→JSON conversion, rebalancing, featurization
//! - [`synth`] — offline generators for the synthetic benchmark datasets
//! - [`checkpoint`] — model serialization

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embedders;
pub mod engine;
pub mod params;
pub mod stree;
pub mod synth;
pub mod training;
pub mod xmltree;

pub use engine::{MappingDictionary, ModelConfig, ModelKind, Template, TreeModel};
pub use stree::{Element, ElementPath, Kind};
pub use training::{Metrics, TrainConfig};

/// Crate-wide error type; each subsystem contributes its own variant.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Json(#[from] stree::SyntaxError),
    #[error(transparent)]
    Xml(#[from] xmltree::XmlError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
