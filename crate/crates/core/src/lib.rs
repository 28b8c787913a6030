//! Clustered, layer-wise federated learning for mmWave beam-sector selection.
//!
//! The crate is `no_std` (with `alloc`) and purely computational: a small dense
//! network engine, a synthetic non-IID vehicular data generator, layer
//! sensitivity scoring, CKA-based model similarity with agglomerative
//! clustering, cluster-aware aggregation plus the FedAvg / MBP / FedLAMA
//! baselines, a stochastic model-transfer channel and the round orchestrator
//! that ties them together.
//!
//! File formats, configuration files and the command line live in the `sigla`
//! companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod aggregation;
pub mod clustering;
pub mod comms;
pub mod dataset;
pub mod error;
mod linalg;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod sensitivity;
pub mod similarity;

pub use error::{Error, Result};
