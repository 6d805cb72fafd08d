//! Sparse identification of discrete-time nonlinear difference equations with
//! control and exogenous inputs.
//!
//! The pipeline runs `dataset` (ingest, center, add noise, delay-embed) then
//! `library` (candidate features) then `regression` (sequentially thresholded
//! least squares). `ensemble` adds library bagging, multi-step elite gating,
//! k-means classification of the elites and per-class aggregation.
//! `simulate` scores models by one-step and closed-loop rollouts.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod library;
pub mod model_file;
pub mod plants;
pub mod regression;
pub mod simulate;

pub use dataset::{CenteringOffsets, NoiseSpec, SnapshotSet, TimeSeries};
pub use ensemble::{EnsembleConfig, EnsembleRun};
pub use error::{Error, Result};
pub use library::{FeatureMatrix, FeatureTerm, LibrarySpec};
pub use regression::{CoefficientMatrix, StlsConfig};
pub use simulate::{PredictionReport, SindyModel};
