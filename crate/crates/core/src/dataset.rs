//! Audio discovery and the mirrored artifact layout.
//!
//! For a dataset named after its top-level audio folder, everything lives
//! under `<output_root>/<dataset>/`:
//!
//! ```text
//! index.json                                   discovered files
//! embeddings/<model>/<rel>.npy                 (n_segments, dim) float32
//! embeddings/<model>/<rel>.timestamps.json     segment spans + source identity
//! embeddings/<model>/metadata.yml
//! reduced/<model>/<reducer>/<rel>.json
//! predictions/<model>/<source>/<rel>.selections.txt
//! predictions/<model>/combined_<source>.selections.txt
//! evaluations/<model>/*.json
//! evaluations/selections/*.csv
//! logs/run_<timestamp>.yaml
//! ```
//!
//! `<rel>` is the audio path relative to the audio folder with its extension
//! removed, so each audio file maps to exactly one artifact per model.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use chrono::{DateTime, Utc};
use ndarray::{concatenate, Array2, Axis};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;
use walkdir::WalkDir;

use crate::audio::{self, TimeSpan};
use crate::backends::ModelSpec;
use crate::config::LoadedConfig;
use crate::util::{atomic_write, is_temp_file, rel_string};

pub const SUPPORTED_EXTENSIONS: [&str; 4] = ["wav", "flac", "aiff", "mp3"];
const SIDECAR_SUFFIX: &str = "timestamps.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0} is not a readable directory")]
    NotADirectory(PathBuf),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact(s): {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingArtifacts(Vec<PathBuf>),
    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("matrix has {rows} rows but {timestamps} timestamps")]
    Shape { rows: usize, timestamps: usize },
    #[error("model {model:?} has not been processed yet ({path} missing)")]
    NotProcessed { model: String, path: PathBuf },
    #[error("file {0:?} is not in the dataset index")]
    UnknownFile(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioFileEntry {
    /// Path relative to the audio folder, `/`-separated.
    pub rel_path: String,
    pub size: u64,
    /// Modification time, whole seconds since the UNIX epoch.
    pub mtime: i64,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl AudioFileEntry {
    /// Relative path without extension; the key for all per-file artifacts.
    pub fn artifact_stem(&self) -> String {
        artifact_stem(&self.rel_path)
    }

    pub fn file_name(&self) -> &str {
        self.rel_path.rsplit('/').next().unwrap_or(&self.rel_path)
    }
}

fn artifact_stem(rel: &str) -> String {
    let (dir, name) = match rel.rfind('/') {
        Some(i) => (&rel[..=i], &rel[i + 1..]),
        None => ("", rel),
    };
    let stem = match name.rfind('.') {
        Some(i) if i > 0 => &name[..i],
        _ => name,
    };
    format!("{dir}{stem}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub rel_path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub dataset_name: String,
    pub files: Vec<AudioFileEntry>,
    /// Files with a supported extension whose header could not be read.
    #[serde(default)]
    pub skipped: Vec<SkippedFile>,
}

impl DatasetIndex {
    pub fn get(&self, rel: &str) -> Option<&AudioFileEntry> {
        self.files.iter().find(|e| e.rel_path == rel)
    }

    pub fn position(&self, rel: &str) -> Option<usize> {
        self.files.iter().position(|e| e.rel_path == rel)
    }

    /// Match an annotation's file reference: exact relative path first, then
    /// a unique bare file name.
    pub fn resolve_file(&self, name: &str) -> Option<&AudioFileEntry> {
        let name = name.replace('\\', "/");
        if let Some(e) = self.get(&name) {
            return Some(e);
        }
        let mut hits = self.files.iter().filter(|e| e.file_name() == name);
        match (hits.next(), hits.next()) {
            (Some(e), None) => Some(e),
            _ => None,
        }
    }

    /// Inverse of the embedding mirroring rule.
    pub fn audio_for_artifact(&self, stem: &str) -> Option<&AudioFileEntry> {
        self.files.iter().find(|e| e.artifact_stem() == stem)
    }

    pub fn total_duration_s(&self) -> f64 {
        self.files.iter().map(|e| e.duration_s).sum()
    }

    pub fn save(&self, dataset_root: &Path) -> Result<(), DatasetError> {
        let path = dataset_root.join("index.json");
        let text = serde_json::to_vec_pretty(self).expect("index serializes");
        atomic_write(&path, &text).map_err(io_err(&path))
    }

    pub fn load(dataset_root: &Path) -> Result<Self, DatasetError> {
        let path = dataset_root.join("index.json");
        let bytes = fs::read(&path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                DatasetError::MissingArtifacts(vec![path.clone()])
            } else {
                DatasetError::Io {
                    path: path.clone(),
                    source,
                }
            }
        })?;
        serde_json::from_slice(&bytes).map_err(|e| DatasetError::Corrupt {
            path,
            reason: e.to_string(),
        })
    }
}

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn mtime_secs(meta: &fs::Metadata) -> i64 {
    meta.modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Recursively list supported audio files under `dir`, sorted by relative
/// path. Unreadable headers and artifact-path collisions land in `skipped`.
pub fn get_audio_files(dir: &Path) -> Result<DatasetIndex, DatasetError> {
    if !dir.is_dir() {
        return Err(DatasetError::NotADirectory(dir.to_path_buf()));
    }
    let mut candidates = Vec::new();
    for entry in WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| DatasetError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf()),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk failed")),
        })?;
        if entry.file_type().is_file() && is_supported(entry.path()) {
            let rel = entry.path().strip_prefix(dir).expect("walk stays under root");
            candidates.push((rel_string(rel), entry.path().to_path_buf()));
        }
    }
    candidates.sort();

    let mut files = Vec::new();
    let mut skipped = Vec::new();
    let mut stems: HashMap<String, String> = HashMap::new();
    for (rel, full) in candidates {
        let stem = artifact_stem(&rel);
        if let Some(first) = stems.get(&stem) {
            warn!(file = %rel, other = %first, "artifact path collision; skipped");
            skipped.push(SkippedFile {
                reason: format!("artifact path collides with {first}"),
                rel_path: rel,
            });
            continue;
        }
        let meta = fs::metadata(&full).map_err(io_err(&full))?;
        match audio::probe(&full) {
            Ok(info) if info.frames > 0 => {
                stems.insert(stem, rel.clone());
                files.push(AudioFileEntry {
                    rel_path: rel,
                    size: meta.len(),
                    mtime: mtime_secs(&meta),
                    duration_s: info.duration_s(),
                    sample_rate: info.sample_rate,
                });
            }
            Ok(_) => {
                warn!(file = %rel, "audio file has no samples; skipped");
                skipped.push(SkippedFile {
                    rel_path: rel,
                    reason: "no audio samples".into(),
                });
            }
            Err(e) => {
                warn!(file = %rel, error = %e, "unreadable audio header; skipped");
                skipped.push(SkippedFile {
                    rel_path: rel,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(DatasetIndex {
        dataset_name: crate::config::dataset_name(dir),
        files,
        skipped,
    })
}

/// Cache identity of a source file: size plus whole-second mtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileIdentity {
    pub size: u64,
    pub mtime: i64,
}

impl FileIdentity {
    pub fn of(entry: &AudioFileEntry) -> Self {
        Self {
            size: entry.size,
            mtime: entry.mtime,
        }
    }
}

/// Identities recorded in completed embedding artifacts, per (model, file).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CacheState {
    entries: BTreeMap<(String, String), FileIdentity>,
}

impl CacheState {
    pub fn insert(&mut self, model: &str, rel: &str, id: FileIdentity) {
        self.entries
            .insert((model.to_string(), rel.to_string()), id);
    }

    pub fn is_complete(&self, model: &str, entry: &AudioFileEntry) -> bool {
        self.entries
            .get(&(model.to_string(), entry.rel_path.clone()))
            .is_some_and(|id| *id == FileIdentity::of(entry))
    }

    /// Read sidecars for every (model, file). A file is complete only when
    /// both its matrix and its sidecar exist and the matrix header parses.
    pub fn scan(dataset_root: &Path, models: &[String], index: &DatasetIndex) -> Self {
        let mut state = Self::default();
        for model in models {
            let layout = ArtifactLayout::open(dataset_root, model);
            for entry in &index.files {
                let Ok(sidecar) = layout.read_sidecar(&entry.rel_path) else {
                    continue;
                };
                if sidecar.source != entry.rel_path {
                    continue;
                }
                let matrix_ok = fs::File::open(layout.embedding_path(&entry.rel_path))
                    .ok()
                    .and_then(|f| Array2::<f32>::read_npy(f).ok())
                    .is_some_and(|m| m.nrows() == sidecar.timestamps.len());
                if matrix_ok {
                    state.insert(
                        model,
                        &entry.rel_path,
                        FileIdentity {
                            size: sidecar.size,
                            mtime: sidecar.mtime,
                        },
                    );
                }
            }
        }
        state
    }
}

/// Path mapping for one (dataset, model) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactLayout {
    root: PathBuf,
    model: String,
}

/// Build the layout for a model under `output_root` and create its folders.
pub fn layout_for(
    dataset: &DatasetIndex,
    model: &ModelSpec,
    output_root: &Path,
) -> Result<ArtifactLayout, DatasetError> {
    let layout = ArtifactLayout::open(&output_root.join(&dataset.dataset_name), &model.name);
    for dir in [
        layout.embeddings_dir(),
        layout.root.join("reduced").join(&layout.model),
        layout.root.join("predictions").join(&layout.model),
        layout.evaluations_dir(),
        layout.logs_dir(),
    ] {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    Ok(layout)
}

/// Timestamp sidecar stored next to each embedding matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampSidecar {
    pub source: String,
    pub size: u64,
    pub mtime: i64,
    pub timestamps: Vec<TimeSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub matrix: PathBuf,
    pub timestamps: PathBuf,
}

/// One file's embeddings with their segment spans.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub file: String,
    pub matrix: Array2<f32>,
    pub timestamps: Vec<TimeSpan>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope<'a> {
    File(&'a str),
    Dataset,
}

/// Row of a stacked matrix traced back to its file and segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowSource {
    pub file: usize,
    pub segment: usize,
}

/// Whole-dataset embeddings concatenated in index order.
#[derive(Debug, Clone)]
pub struct StackedEmbeddings {
    pub matrix: Array2<f32>,
    pub rows: Vec<RowSource>,
    pub sets: Vec<EmbeddingSet>,
}

impl StackedEmbeddings {
    pub fn stack(sets: Vec<EmbeddingSet>, dim: usize) -> Self {
        let views: Vec<_> = sets.iter().map(|s| s.matrix.view()).collect();
        let matrix = if views.is_empty() {
            Array2::zeros((0, dim))
        } else {
            concatenate(Axis(0), &views).expect("all sets share the model dimension")
        };
        let rows = sets
            .iter()
            .enumerate()
            .flat_map(|(f, s)| (0..s.len()).map(move |segment| RowSource { file: f, segment }))
            .collect();
        Self { matrix, rows, sets }
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn span(&self, row: usize) -> TimeSpan {
        let r = self.rows[row];
        self.sets[r.file].timestamps[r.segment]
    }

    pub fn file_of(&self, row: usize) -> &str {
        &self.sets[self.rows[row].file].file
    }
}

impl ArtifactLayout {
    /// Layout for an existing dataset root; creates nothing.
    pub fn open(dataset_root: &Path, model: &str) -> Self {
        Self {
            root: dataset_root.to_path_buf(),
            model: model.to_string(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.root.join("embeddings").join(&self.model)
    }

    pub fn embedding_path(&self, rel: &str) -> PathBuf {
        self.embeddings_dir()
            .join(format!("{}.npy", artifact_stem(rel)))
    }

    pub fn timestamps_path(&self, rel: &str) -> PathBuf {
        self.embeddings_dir()
            .join(format!("{}.{SIDECAR_SUFFIX}", artifact_stem(rel)))
    }

    pub fn metadata_path(&self) -> PathBuf {
        self.embeddings_dir().join("metadata.yml")
    }

    pub fn reduced_dir(&self, reducer: &str) -> PathBuf {
        self.root.join("reduced").join(&self.model).join(reducer)
    }

    pub fn reduced_path(&self, reducer: &str, rel: &str) -> PathBuf {
        self.reduced_dir(reducer)
            .join(format!("{}.json", artifact_stem(rel)))
    }

    pub fn predictions_dir(&self, source: &str) -> PathBuf {
        self.root.join("predictions").join(&self.model).join(source)
    }

    pub fn prediction_table_path(&self, source: &str, rel: &str) -> PathBuf {
        self.predictions_dir(source)
            .join(format!("{}.selections.txt", artifact_stem(rel)))
    }

    pub fn combined_table_path(&self, source: &str) -> PathBuf {
        self.root
            .join("predictions")
            .join(&self.model)
            .join(format!("combined_{source}.selections.txt"))
    }

    pub fn evaluations_dir(&self) -> PathBuf {
        self.root.join("evaluations").join(&self.model)
    }

    pub fn selections_dir(&self) -> PathBuf {
        self.root.join("evaluations").join("selections")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    /// Recover the audio relative path from an embedding artifact path.
    pub fn audio_for_embedding<'a>(
        &self,
        artifact: &Path,
        index: &'a DatasetIndex,
    ) -> Option<&'a AudioFileEntry> {
        let rel = artifact.strip_prefix(self.embeddings_dir()).ok()?;
        let rel = rel_string(rel);
        let stem = rel.strip_suffix(".npy")?;
        index.audio_for_artifact(stem)
    }

    /// Remove temp files left behind by an interrupted writer.
    pub fn sweep_temp_files(&self) -> usize {
        let mut removed = 0;
        for dir in [
            self.embeddings_dir(),
            self.root.join("reduced").join(&self.model),
            self.root.join("predictions").join(&self.model),
            self.evaluations_dir(),
        ] {
            for entry in WalkDir::new(&dir).into_iter().filter_map(|e| e.ok()) {
                if entry.file_type().is_file()
                    && is_temp_file(entry.path())
                    && fs::remove_file(entry.path()).is_ok()
                {
                    removed += 1;
                }
            }
        }
        removed
    }

    /// Write a file's matrix and sidecar. The sidecar goes last and marks the
    /// pair complete; each file is written atomically.
    pub fn write_embeddings(
        &self,
        rel: &str,
        identity: FileIdentity,
        matrix: &Array2<f32>,
        timestamps: &[TimeSpan],
    ) -> Result<ArtifactPaths, DatasetError> {
        if matrix.nrows() != timestamps.len() {
            return Err(DatasetError::Shape {
                rows: matrix.nrows(),
                timestamps: timestamps.len(),
            });
        }
        let paths = ArtifactPaths {
            matrix: self.embedding_path(rel),
            timestamps: self.timestamps_path(rel),
        };
        let mut bytes = Vec::new();
        matrix
            .as_standard_layout()
            .write_npy(Cursor::new(&mut bytes))
            .map_err(|e| DatasetError::Corrupt {
                path: paths.matrix.clone(),
                reason: e.to_string(),
            })?;
        atomic_write(&paths.matrix, &bytes).map_err(io_err(&paths.matrix))?;
        let sidecar = TimestampSidecar {
            source: rel.to_string(),
            size: identity.size,
            mtime: identity.mtime,
            timestamps: timestamps.to_vec(),
        };
        let json = serde_json::to_vec(&sidecar).expect("sidecar serializes");
        atomic_write(&paths.timestamps, &json).map_err(io_err(&paths.timestamps))?;
        Ok(paths)
    }

    pub fn read_sidecar(&self, rel: &str) -> Result<TimestampSidecar, DatasetError> {
        let path = self.timestamps_path(rel);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(DatasetError::MissingArtifacts(vec![path]))
            }
            Err(source) => return Err(DatasetError::Io { path, source }),
        };
        serde_json::from_slice(&bytes).map_err(|e| DatasetError::Corrupt {
            path,
            reason: e.to_string(),
        })
    }

    fn read_one(&self, rel: &str) -> Result<EmbeddingSet, DatasetError> {
        let path = self.embedding_path(rel);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let matrix = Array2::<f32>::read_npy(file).map_err(|e| DatasetError::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let sidecar = self.read_sidecar(rel)?;
        if sidecar.timestamps.len() != matrix.nrows() {
            return Err(DatasetError::Corrupt {
                path,
                reason: format!(
                    "{} rows but {} timestamps",
                    matrix.nrows(),
                    sidecar.timestamps.len()
                ),
            });
        }
        Ok(EmbeddingSet {
            file: rel.to_string(),
            matrix,
            timestamps: sidecar.timestamps,
        })
    }

    /// Load embeddings for one file or for the whole dataset in index order.
    /// Every absent artifact is listed in the error.
    pub fn read_embeddings(
        &self,
        scope: Scope<'_>,
        index: &DatasetIndex,
    ) -> Result<Vec<EmbeddingSet>, DatasetError> {
        let files: Vec<&str> = match scope {
            Scope::File(rel) => {
                if index.get(rel).is_none() {
                    return Err(DatasetError::UnknownFile(rel.to_string()));
                }
                vec![rel]
            }
            Scope::Dataset => index.files.iter().map(|e| e.rel_path.as_str()).collect(),
        };
        let missing: Vec<PathBuf> = files
            .iter()
            .flat_map(|rel| [self.embedding_path(rel), self.timestamps_path(rel)])
            .filter(|p| !p.is_file())
            .collect();
        if !missing.is_empty() {
            return Err(DatasetError::MissingArtifacts(missing));
        }
        files.into_iter().map(|rel| self.read_one(rel)).collect()
    }

    pub fn write_metadata(&self, meta: &RunMetadata) -> Result<PathBuf, DatasetError> {
        let path = self.metadata_path();
        let text = serde_yaml::to_string(meta).expect("metadata serializes");
        atomic_write(&path, text.as_bytes()).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn read_metadata(&self) -> Result<RunMetadata, DatasetError> {
        let path = self.metadata_path();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(DatasetError::NotProcessed {
                    model: self.model.clone(),
                    path,
                })
            }
            Err(source) => return Err(DatasetError::Io { path, source }),
        };
        serde_yaml::from_str(&text).map_err(|e| DatasetError::Corrupt {
            path,
            reason: e.to_string(),
        })
    }
}

/// Human-readable summary of one model's embedding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub model: String,
    pub sample_rate: u32,
    pub window_s: f64,
    pub embedding_dim: usize,
    pub file_count: usize,
    pub segment_count: usize,
    pub total_duration_s: f64,
    pub processing_start: DateTime<Utc>,
    pub processing_end: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_snapshot: Option<LoadedConfig>,
}
