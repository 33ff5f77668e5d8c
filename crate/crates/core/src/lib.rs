//! Botnet detection that fuses per-node flow features with communication-graph
//! topology through a pretrained, frozen graph convolutional network, and
//! classifies the fused node embeddings with extremely randomized trees.
//!
//! | module | stage |
//! |--------|-------|
//! | [`flow`] | flow-record parsing, TCP/UDP filter, sliding windows |
//! | [`features`] | the five per-node flow features |
//! | [`graph`] | directed communication graph, normalized propagation matrix |
//! | [`gcn`] | residual GCN forward/backward, Adam, model files |
//! | [`synth`] | synthetic topologies and flow traces |
//! | [`pretrain`] | topology-only pretraining with early stopping |
//! | [`trees`] | Extra-Trees classifier |
//! | [`pipeline`] | embedding, min-max normalization, training and detection |
//! | [`eval`] | metrics, cross-validation, depth sweep |

pub mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod gcn;
pub mod graph;
pub mod pipeline;
pub mod pretrain;
pub mod synth;
pub mod trees;

pub use error::{Error, Result};
