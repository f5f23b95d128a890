//! Spatially-aware object and scene-graph embeddings learned by aligning
//! visual object features with multi-hop relational paths over force-histogram
//! scene graphs.
//!
//! Pipeline: [`scene`] generates synthetic scenes, [`force`] describes every
//! object pair with a symmetric force banner, [`graph`] builds scene graphs and
//! enumerates k-hop paths, [`encoders`] embeds objects, edges and paths on the
//! autodiff engine in [`tensor`], [`training`] fits them with a multi-level
//! contrastive objective and [`eval`] measures retrieval and probing quality.

pub mod error;
pub mod seed;
pub mod mask;
pub mod scene;
pub mod corpus;
pub mod force;
pub mod graph;
pub mod tensor;
pub mod encoders;
pub mod training;
pub mod eval;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use error::{Error, Result};
