//! Cross-modal retrieval by matching landmark graphs.
//!
//! Landmarks become kNN graphs, a GCN encodes each graph, and
//! bidirectional cross-attention fuses the two sides. Entropic optimal
//! transport then aligns the landmark tokens. Training uses a triplet
//! objective that combines global and transport-based similarity.

pub mod attention;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod graph;
pub mod model;
pub mod ot;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
