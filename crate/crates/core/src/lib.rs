//! Learning-to-hash for multi-label retrieval: a small MLP maps feature
//! vectors to K-bit codes, trained with an NDCG-weighted triplet ranking
//! loss, then searched by Hamming distance.

pub mod baseline;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod io;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
