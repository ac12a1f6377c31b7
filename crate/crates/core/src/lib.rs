//! Tick data to 3-class high-frequency return prediction.
//!
//! The pipeline runs in stages, each usable on its own:
//!
//! 1. [`ingest`]: parse L5 order-book snapshots, resample them onto the
//!    0.5 s grid per trading session and mask the warm-up region.
//! 2. [`features`]: the 13 per-timestamp variables, the forward mid-price
//!    return and the fee-thresholded label in {-1, 0, +1}.
//! 3. [`dataset`]: rolling 60x13 windows, per-sample z-scoring,
//!    chronological 8:1:1 split and per-epoch random undersampling.
//! 4. [`losses`], [`nn`], [`training`]: cross-entropy plus four
//!    imbalance-aware losses, a from-scratch MLP and LSTM with Adam, and
//!    an early-stopped training loop.
//!
//! [`factors`] computes the eight diagnostic factors used to sanity-check
//! a tick stream and [`synth`] generates synthetic streams with a tunable
//! amount of predictable signal.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise. Results
//! are bit-identical between the two modes.

pub mod config;
pub mod dataset;
pub mod error;
pub mod factors;
pub mod features;
pub mod ingest;
pub mod losses;
pub mod manifest;
pub mod nn;
pub mod par;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use par::Parallelism;

/// Number of label classes (-1, 0, +1).
pub const NUM_CLASSES: usize = 3;
/// Number of per-timestamp features.
pub const FEATURE_DIM: usize = 13;
/// Rows per sample window.
pub const WINDOW_LEN: usize = 60;
/// Grid spacing of the resampled tick stream.
pub const GRID_MS: i64 = 500;
/// Default forward-return horizon in grid steps (29.5 s).
pub const DEFAULT_HORIZON: usize = 59;
