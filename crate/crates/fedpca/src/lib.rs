//! Deterministic desk-scale simulator of noise-robust fair federated learning.
//!
//! The library trains a small MLP across synthetic clients whose data is
//! split into a majority ("common") distribution, a feature-corrupted
//! minority ("rare") distribution, and a subset of clients with flipped
//! labels. Each round the server scores every client by the pair
//! (loss, feature-dispersion) of the current global model, fits a
//! three-component Gaussian mixture over those pairs to separate reliable,
//! rare, and mislabeled clients, rebuilds reliable local datasets, and
//! aggregates with fairness-aware weights. FedAvg and a loss-weighted
//! baseline run in the same harness for comparison.
//!
//! Everything is seeded: identical configurations produce byte-identical
//! artifacts regardless of thread scheduling.

// The numeric kernels index several parallel structures by one loop
// variable; iterator rewrites obscure that correspondence.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod matrix;
pub mod nn;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
