//! Core of the sonoscope embedding pipeline.
//!
//! The crate is organised along the stages a run goes through:
//!
//! * [`config`] loads and validates run configuration, records runs and plans
//!   the work that is still outstanding.
//! * [`dataset`] discovers audio files and owns the mirrored on-disk artifact
//!   layout (embeddings, reductions, predictions, evaluations, logs).
//! * [`audio`] decodes, resamples, segments and renders spectrograms.
//! * [`backends`] is the feature-extractor registry with the reference mel
//!   backends and the external-process adapter.
//! * [`labels`] infers default labels and maps annotations onto segments.
//! * [`eval`] holds clustering, probing and benchmarking.
//! * [`dimred`] projects embeddings to 2-d for the dashboard.
//! * [`predictions`] turns classifier scores into Raven tables and heatmaps.

pub mod audio;
pub mod backends;
pub mod config;
pub mod dataset;
pub mod dimred;
pub mod eval;
pub mod labels;
pub mod predictions;
mod util;

pub use util::atomic_write;

pub use audio::{AudioBuffer, SegmentBatch, SpectrogramImage, TimeSpan};
pub use backends::{BackendHandle, ModelSpec, Registry};
pub use config::{EvalTask, RunConfig, RunPlan, RunRecord, Settings};
pub use dataset::{ArtifactLayout, DatasetIndex, EmbeddingSet, RunMetadata};
pub use labels::{Annotation, DefaultLabels, GroundTruthMatrix};

/// Version string written into run records.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
