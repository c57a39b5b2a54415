//! Representation sources: the frozen decoder and bidirectional encoder, and the
//! trainable relational graph encoder.

pub mod backbone;
pub mod graph;
pub mod transformer;

pub use backbone::{BackboneConfig, FrozenBackbone};
pub use graph::{GraphEncoderParams, GraphStructure};
pub use transformer::{KvCache, Param, Transformer};
