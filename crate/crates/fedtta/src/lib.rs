//! Simulator for federated face presentation attack detection with test-time
//! adaptation.
//!
//! Data centers jointly train a spoof/real classifier by federated averaging
//! without sharing raw data (`federation`). Deployed users then adapt the
//! batch-norm affine parameters of the downloaded model to their own unlabeled
//! traffic by entropy minimization (`tta`). Synthetic domain-shifted benchmarks
//! (`datagen`), threshold-based metrics (`metrics`), and the experiment ladder
//! plus CLI plumbing (`harness`, `checkpoint`) round out the crate. All
//! numerics are 64-bit and all randomness flows from explicit seeds, so every
//! run is reproducible bit for bit.

pub mod checkpoint;
pub mod datagen;
mod error;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod tta;

pub use error::{Error, Result};
