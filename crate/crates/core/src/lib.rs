//! Online detection of cascading change-points on networks.
//!
//! A change spreads over a known graph as a diffusion-model failure
//! cascade; each node's measurement stream switches distribution once the
//! node fails. The detector scans a sliding window with a generalized
//! likelihood ratio over pruned failure-path hypotheses and raises an
//! alarm when the statistic exceeds a threshold. The crate also ships the
//! cascade and measurement simulators, classical CuSum-family baselines,
//! and a Monte Carlo harness for average-run-length calibration and
//! detection-delay benchmarks.
//!
//! Node ids and ticks are 1-based in every text format (CSV, JSON, CLI)
//! and 0-based in memory.

pub mod baselines;
pub mod bench;
pub mod cli;
pub mod detector;
pub mod error;
pub mod likelihood;
pub mod sim;
pub mod topology;

pub use detector::{run_detector, CascadeDetector, DetectorConfig, StoppingReport};
pub use error::{Error, Result};
pub use topology::{Graph, InfluenceMatrix};
