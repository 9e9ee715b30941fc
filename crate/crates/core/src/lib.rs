//! Spike-camera particle image velocimetry workbench.
//!
//! The crate covers the full desk-scale pipeline: synthetic particle scenes
//! driven by analytic flow fields, an integrate-and-fire spike sensor model,
//! voxel encoding of spike streams, classical correlation and variational
//! flow estimators, a trainable recurrent flow network with an f64 reverse-mode
//! autodiff core, and evaluation / visualization utilities.
//!
//! Everything is deterministic under a fixed seed: simulation, initialization,
//! training, and estimation produce bit-identical results across runs and
//! thread counts.

pub mod bench;
pub mod classical;
pub mod config;
pub mod error;
pub mod flow;
pub mod img;
pub mod metrics;
pub mod scene;
pub mod selftest;
pub mod siv;
pub mod spike;
pub mod tensor;
pub mod util;
pub mod viz;
pub mod voxel;

pub use error::{Error, Result};
