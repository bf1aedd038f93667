//! Cross-modal hashing with a learned, fused anchor graph.
//!
//! Training builds one anchor graph per modality, fuses them, and then
//! alternates between refining a learned anchor graph, its spectral
//! embedding, the binary codes and per-modality linear hash functions.
//! [`retrieval`] encodes new data and scores Hamming ranking.

pub mod anchor_graph;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod retrieval;
pub mod simplex_opt;
pub mod spectral;
pub mod storage;
pub mod training;

pub use error::{Error, Result};
pub use training::{train, HashModel, Hyperparams, TrainTrace};
