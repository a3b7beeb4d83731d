//! Two-dimensional reductions of a model's embeddings for visualization.

pub mod pca;
pub mod tsne;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::TimeSpan;
use crate::config::ReducerKind;
use crate::dataset::{ArtifactLayout, DatasetError, DatasetIndex, Scope, StackedEmbeddings};
use crate::util::{atomic_write, round_to};

pub use pca::{pca_fit_transform, PcaFit};
pub use tsne::{tsne_fit_transform, TsneParams};

const MANIFEST: &str = ".manifest.json";
const COORD_DECIMALS: i32 = 6;

#[derive(Debug, Error)]
pub enum DimredError {
    #[error("need at least {need} points, got {n}")]
    TooFewPoints { n: usize, need: usize },
    #[error("output dimension {out_dim} exceeds min(n = {n}, dim = {dim})")]
    OutDim { out_dim: usize, n: usize, dim: usize },
    #[error("{n} points exceed the exact t-SNE cap of {cap}; subsample the dataset or use the pca reducer")]
    TooManyPoints { n: usize, cap: usize },
    #[error("perplexity {perplexity} needs at least {} points, got {n}; lower the perplexity or use the pca reducer", (perplexity * 3.0).ceil())]
    Perplexity { perplexity: f64, n: usize },
    #[error("t-SNE diverged at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

/// Pluggable 2-d reducer.
pub trait Reducer: Sync {
    fn name(&self) -> &str;
    /// Parameters that change the output; part of the cache identity.
    fn fingerprint(&self) -> String;
    fn fit_transform(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f64>, DimredError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PcaReducer;

impl Reducer for PcaReducer {
    fn name(&self) -> &str {
        "pca"
    }

    fn fingerprint(&self) -> String {
        "pca(2)".into()
    }

    fn fit_transform(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f64>, DimredError> {
        let n = x.nrows();
        if x.ncols() < 2 || n < 2 {
            return Err(DimredError::TooFewPoints { n, need: 2 });
        }
        Ok(pca_fit_transform(x, 2)?.transformed)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TsneReducer {
    pub params: TsneParams,
}

impl Reducer for TsneReducer {
    fn name(&self) -> &str {
        "tsne"
    }

    fn fingerprint(&self) -> String {
        let p = &self.params;
        format!(
            "tsne(perplexity={},iterations={},lr={},exaggeration={}x{},seed={})",
            p.perplexity, p.iterations, p.learning_rate, p.early_exaggeration, p.exaggeration_iters, p.seed
        )
    }

    fn fit_transform(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f64>, DimredError> {
        tsne_fit_transform(x, &self.params)
    }
}

pub fn reducer_for(kind: ReducerKind, seed: u64) -> Box<dyn Reducer> {
    match kind {
        ReducerKind::Pca => Box::new(PcaReducer),
        ReducerKind::Tsne => Box::new(TsneReducer {
            params: TsneParams {
                seed,
                ..Default::default()
            },
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedFile {
    pub points: Vec<[f64; 2]>,
    pub timestamps: Vec<TimeSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedEmbeddings {
    pub reducer: String,
    pub model: String,
    pub files: BTreeMap<String, ReducedFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    reducer: String,
    fingerprint: String,
    sources: Vec<(String, u64, i64, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOutcome {
    Written { files: usize, points: usize },
    Cached,
}

fn manifest_for(
    layout: &ArtifactLayout,
    index: &DatasetIndex,
    reducer: &dyn Reducer,
) -> Result<Manifest, DimredError> {
    let mut sources = Vec::with_capacity(index.files.len());
    for e in &index.files {
        let side = layout.read_sidecar(&e.rel_path)?;
        sources.push((e.rel_path.clone(), side.size, side.mtime, side.timestamps.len()));
    }
    Ok(Manifest {
        reducer: reducer.name().to_string(),
        fingerprint: reducer.fingerprint(),
        sources,
    })
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<(), DimredError> {
    atomic_write(&path, bytes).map_err(|e| DimredError::Write {
        reason: e.to_string(),
        path,
    })
}

/// Fit once over the whole dataset and write one JSON per audio file. A
/// rerun over unchanged embeddings with the same reducer is a no-op.
pub fn reduce_and_persist(
    layout: &ArtifactLayout,
    index: &DatasetIndex,
    reducer: &dyn Reducer,
    dim: usize,
) -> Result<ReduceOutcome, DimredError> {
    let manifest = manifest_for(layout, index, reducer)?;
    let dir = layout.reduced_dir(reducer.name());
    let manifest_path = dir.join(MANIFEST);
    let cached = std::fs::read(&manifest_path)
        .ok()
        .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
        .is_some_and(|m| m == manifest)
        && index
            .files
            .iter()
            .all(|e| layout.reduced_path(reducer.name(), &e.rel_path).is_file());
    if cached {
        return Ok(ReduceOutcome::Cached);
    }

    let stacked = StackedEmbeddings::stack(layout.read_embeddings(Scope::Dataset, index)?, dim);
    let coords = reducer.fit_transform(stacked.matrix.view())?;
    let mut row = 0;
    for set in &stacked.sets {
        let points = (0..set.len())
            .map(|i| {
                let r = row + i;
                [round_to(coords[[r, 0]], COORD_DECIMALS), round_to(coords[[r, 1]], COORD_DECIMALS)]
            })
            .collect();
        row += set.len();
        let doc = ReducedEmbeddings {
            reducer: reducer.name().to_string(),
            model: layout.model().to_string(),
            files: BTreeMap::from([(
                set.file.clone(),
                ReducedFile {
                    points,
                    timestamps: set.timestamps.clone(),
                },
            )]),
        };
        let bytes = serde_json::to_vec(&doc).expect("reduced embeddings serialize");
        write(layout.reduced_path(reducer.name(), &set.file), &bytes)?;
    }
    write(manifest_path, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(ReduceOutcome::Written {
        files: stacked.sets.len(),
        points: stacked.len(),
    })
}

/// Merge the per-file reductions of a dataset.
pub fn load_reduced(
    layout: &ArtifactLayout,
    index: &DatasetIndex,
    reducer: &str,
) -> Result<ReducedEmbeddings, DimredError> {
    let mut files = BTreeMap::new();
    let mut missing = Vec::new();
    for e in &index.files {
        let path = layout.reduced_path(reducer, &e.rel_path);
        match std::fs::read(&path) {
            Ok(bytes) => {
                let doc: ReducedEmbeddings = serde_json::from_slice(&bytes).map_err(|err| {
                    DatasetError::Corrupt {
                        path: path.clone(),
                        reason: err.to_string(),
                    }
                })?;
                files.extend(doc.files);
            }
            Err(_) => missing.push(path),
        }
    }
    if !missing.is_empty() {
        return Err(DatasetError::MissingArtifacts(missing).into());
    }
    Ok(ReducedEmbeddings {
        reducer: reducer.to_string(),
        model: layout.model().to_string(),
        files,
    })
}
