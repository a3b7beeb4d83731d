//! Evaluations that run on persisted embeddings alone.

pub mod benchmark;
pub mod clustering;
pub mod kmeans;
pub mod metrics;
pub mod probe;

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

use crate::util::atomic_write;

pub use benchmark::{benchmark, segment_scores, BenchmarkResult};
pub use clustering::{run_clustering_task, ClusteringReport, ClusteringResult, ClusteringScope, Score};
pub use kmeans::{kmeans, KMeansResult};
pub use metrics::{ami, ari, average_precision};
pub use probe::{
    knn_probe, split, train_linear_probe, LinearProbe, ProbeData, ProbeHyperparams, ProbeResult,
    ProbeType, SealedTest, SplitOutcome, Splits, DEFAULT_KNN_K, MIN_CLASS_POSITIVES,
};

/// Evaluation documents under `evaluations/<model>/`.
pub const CLUSTERING_FILE: &str = "clustering.json";
pub const PROBE_KNN_FILE: &str = "probe_knn.json";
pub const PROBE_LINEAR_FILE: &str = "probe_linear.json";
pub const BENCHMARK_FILE: &str = "benchmark.json";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{0} needs at least one element")]
    Empty(&'static str),
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("no class has enough positives to probe")]
    NoProbeClasses,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("prediction classes share no names with annotation classes ({predicted} vs {annotated})")]
    NoClassOverlap { predicted: String, annotated: String },
    #[error("no class with positives to score")]
    NoPositives,
    #[error("i/o error at {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// Evaluation documents are written as pretty JSON in one atomic step.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("evaluation result serializes");
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, EvalError> {
    let bytes = std::fs::read(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
