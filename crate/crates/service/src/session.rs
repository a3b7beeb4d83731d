//! Request logic over one dataset's artifact tree. Everything except audio
//! slicing is answered from persisted files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use axum::http::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sonoscope::audio::{self, AudioBuffer, DEFAULT_FFT_SIZE, DEFAULT_FLOOR_DB, DEFAULT_HOP};
use sonoscope::dataset::{CacheState, DatasetError, DatasetIndex, RunMetadata};
use sonoscope::dimred::{load_reduced, DimredError};
use sonoscope::eval::{
    self, ClusteringReport, ClusteringScope, BENCHMARK_FILE, CLUSTERING_FILE, PROBE_KNN_FILE,
    PROBE_LINEAR_FILE,
};
use sonoscope::eval::clustering::GROUND_TRUTH;
use sonoscope::labels::{
    create_default_labels, ground_truth_by_model, parse_annotations, AnnotationTable,
};
use sonoscope::predictions::{export_selection, heatmap, parse_raven_table, PredictionSource};
use sonoscope::{atomic_write, ArtifactLayout, EmbeddingSet, ModelSpec, Registry, SpectrogramImage};

use crate::error::ApiError;

/// Longest audio slice served in one request.
pub const MAX_SLICE_S: f64 = 120.0;

/// Successful reply body.
#[derive(Debug)]
pub enum Reply {
    Json(Value),
    Bytes {
        content_type: &'static str,
        body: Vec<u8>,
    },
}

fn json<T: Serialize>(value: &T) -> Result<Reply, ApiError> {
    serde_json::to_value(value)
        .map(Reply::Json)
        .map_err(|e| ApiError::internal(e.to_string()))
}

fn missing_from(err: DatasetError, hint: &str) -> ApiError {
    match err {
        DatasetError::MissingArtifacts(paths) => ApiError::not_found(format!(
            "{} artifact(s) missing; {hint}",
            paths.len()
        ))
        .with_missing(paths.iter().map(|p| p.display().to_string()).collect()),
        DatasetError::NotProcessed { model, path } => ApiError::not_found(format!(
            "model {model} has not been processed; {hint}"
        ))
        .with_missing(vec![path.display().to_string()]),
        other => ApiError::internal(other.to_string()),
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SliceQuery {
    pub file: Option<String>,
    pub start: Option<f64>,
    pub end: Option<f64>,
    pub model: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct EmbeddingsQuery {
    pub reducer: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ModelQuery {
    pub model: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct HeatmapQuery {
    pub model: Option<String>,
    pub class: Option<String>,
    pub source: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ExportPoint {
    pub file: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ExportRequest {
    pub label: String,
    pub points: Vec<ExportPoint>,
}

#[derive(Serialize)]
struct ModelEntry {
    #[serde(flatten)]
    spec: ModelSpec,
    registered: bool,
    completed: bool,
    completed_files: usize,
    metadata: Option<RunMetadata>,
    reducers: Vec<String>,
    evaluations: Vec<String>,
    predictions: Vec<String>,
}

#[derive(Serialize)]
struct PointLabels {
    time_of_day: Option<u32>,
    day_of_year: Option<u32>,
    continuous_timestamp: Option<f64>,
    parent_directory: String,
    audio_file_name: String,
    cluster_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ground_truth: Option<Vec<String>>,
}

#[derive(Serialize)]
struct FilePoints {
    points: Vec<[f64; 2]>,
    timestamps: Vec<sonoscope::TimeSpan>,
    labels: Vec<PointLabels>,
}

#[derive(Serialize)]
struct EmbeddingsPayload {
    reducer: String,
    model: String,
    /// Label set whose clustering supplies `cluster_id`.
    cluster_target: Option<String>,
    files: BTreeMap<String, FilePoints>,
}

#[derive(Serialize)]
struct ExportReply {
    path: String,
    rows: usize,
}

/// Immutable view of one dataset root.
#[derive(Debug)]
pub struct ApiSession {
    dataset_root: PathBuf,
    audio_root: Option<PathBuf>,
    index: DatasetIndex,
    registry: Registry,
    annotations: Option<AnnotationTable>,
    overlap_threshold: f64,
    default_reducer: Option<String>,
    export_lock: Mutex<()>,
}

fn sorted_names(dir: &Path, want_dir: bool) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir() == want_dir)
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    names
}

impl ApiSession {
    /// Open a dataset root (`<output_root>/<dataset>`) written by a run.
    /// `audio_root` is the dataset's audio folder; without it the audio
    /// endpoints answer 409.
    pub fn open(dataset_root: &Path, audio_root: Option<&Path>) -> Result<Self, ApiError> {
        let index = DatasetIndex::load(dataset_root).map_err(|e| {
            ApiError::not_found(format!(
                "{} is not a processed dataset root: {e}",
                dataset_root.display()
            ))
        })?;
        Ok(Self {
            dataset_root: dataset_root.to_path_buf(),
            audio_root: audio_root.map(Path::to_path_buf),
            index,
            registry: Registry::with_defaults(),
            annotations: None,
            overlap_threshold: 0.5,
            default_reducer: None,
            export_lock: Mutex::new(()),
        })
    }

    pub fn with_registry(mut self, registry: Registry) -> Self {
        self.registry = registry;
        self
    }

    /// Ground truth attached to embedding points.
    pub fn with_annotations(mut self, path: &Path, overlap_threshold: f64) -> Result<Self, ApiError> {
        let table = parse_annotations(path).map_err(|e| ApiError::bad_request(e.to_string()))?;
        self.annotations = Some(table);
        self.overlap_threshold = overlap_threshold;
        Ok(self)
    }

    pub fn with_default_reducer(mut self, reducer: &str) -> Self {
        self.default_reducer = Some(reducer.to_string());
        self
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn dataset_root(&self) -> &Path {
        &self.dataset_root
    }

    fn layout(&self, model: &str) -> ArtifactLayout {
        ArtifactLayout::open(&self.dataset_root, model)
    }

    /// Registered models plus any with artifacts on disk.
    fn model_names(&self) -> Vec<String> {
        let mut names: BTreeSet<String> = self.registry.list().into_iter().map(|s| s.name).collect();
        names.extend(sorted_names(&self.dataset_root.join("embeddings"), true));
        names.into_iter().collect()
    }

    fn spec(&self, model: &str) -> Result<ModelSpec, ApiError> {
        if let Some(spec) = self.registry.get(model) {
            return Ok(spec.clone());
        }
        match self.layout(model).read_metadata() {
            Ok(meta) => Ok(ModelSpec {
                name: meta.model,
                sample_rate: meta.sample_rate,
                window_s: meta.window_s,
                embedding_dim: meta.embedding_dim,
                has_classifier: false,
                class_list: None,
            }),
            Err(_) => Err(ApiError::not_found(format!(
                "unknown model {model:?} (known: {})",
                self.model_names().join(", ")
            ))),
        }
    }

    fn reducers(&self, model: &str) -> Vec<String> {
        sorted_names(&self.dataset_root.join("reduced").join(model), true)
    }

    pub fn models(&self) -> Result<Reply, ApiError> {
        let names = self.model_names();
        let cache = CacheState::scan(&self.dataset_root, &names, &self.index);
        let mut models = Vec::new();
        for name in &names {
            let spec = self.spec(name)?;
            let layout = self.layout(name);
            let completed_files = self
                .index
                .files
                .iter()
                .filter(|e| cache.is_complete(name, e))
                .count();
            let metadata = layout.read_metadata().ok();
            let mut evaluations = sorted_names(&layout.evaluations_dir(), false);
            evaluations.retain(|n| n.ends_with(".json"));
            models.push(ModelEntry {
                registered: self.registry.contains(name),
                completed: metadata.is_some() && completed_files == self.index.files.len(),
                completed_files,
                metadata,
                reducers: self.reducers(name),
                evaluations,
                predictions: sorted_names(&self.dataset_root.join("predictions").join(name), true),
                spec,
            });
        }
        json(&serde_json::json!({
            "dataset": self.index.dataset_name,
            "file_count": self.index.files.len(),
            "audio_attached": self.audio_root.is_some(),
            "models": models,
        }))
    }

    fn clustering_report(&self, model: &str) -> Option<ClusteringReport> {
        eval::read_json(&self.layout(model).evaluations_dir().join(CLUSTERING_FILE)).ok()
    }

    pub fn embeddings(&self, model: &str, query: &EmbeddingsQuery) -> Result<Reply, ApiError> {
        self.spec(model)?;
        let available = self.reducers(model);
        let reducer = match &query.reducer {
            Some(r) => r.clone(),
            None => self
                .default_reducer
                .clone()
                .filter(|r| available.contains(r))
                .or_else(|| available.first().cloned())
                .ok_or_else(|| {
                    ApiError::not_found(format!(
                        "no reduction for model {model}; run the reduction task"
                    ))
                    .with_missing(vec![self
                        .dataset_root
                        .join("reduced")
                        .join(model)
                        .display()
                        .to_string()])
                })?,
        };
        let layout = self.layout(model);
        let reduced = match load_reduced(&layout, &self.index, &reducer) {
            Ok(r) => r,
            Err(DimredError::Dataset(e)) => {
                return Err(missing_from(
                    e,
                    &format!("run the reduction task with reducer {reducer}"),
                ))
            }
            Err(e) => return Err(ApiError::internal(e.to_string())),
        };

        // rows in dataset order, matching the clustering and ground truth
        let sets: Vec<EmbeddingSet> = self
            .index
            .files
            .iter()
            .filter_map(|e| {
                reduced.files.get(&e.rel_path).map(|f| EmbeddingSet {
                    file: e.rel_path.clone(),
                    matrix: ndarray_empty(f.timestamps.len()),
                    timestamps: f.timestamps.clone(),
                })
            })
            .collect();
        let defaults = create_default_labels(&self.index, &sets);
        let gt = self
            .annotations
            .as_ref()
            .map(|t| ground_truth_by_model(t, &self.index, &sets, self.overlap_threshold));
        // prefer the ground-truth clustering, else any covering every row
        let total_rows: usize = sets.iter().map(EmbeddingSet::len).sum();
        let report = self.clustering_report(model);
        let covering = |c: &&eval::ClusteringResult| {
            c.scope == ClusteringScope::Full && c.rows.len() == total_rows
        };
        let clustering = report.as_ref().and_then(|r| {
            r.results
                .iter()
                .filter(covering)
                .find(|c| c.target == GROUND_TRUTH)
                .or_else(|| r.results.iter().find(covering))
        });

        let mut files = BTreeMap::new();
        let mut row = 0;
        for set in &sets {
            let reduced_file = &reduced.files[&set.file];
            let labels = (0..set.len())
                .map(|i| {
                    let r = row + i;
                    let d = &defaults.rows[r];
                    PointLabels {
                        time_of_day: d.time_of_day,
                        day_of_year: d.day_of_year,
                        continuous_timestamp: d.continuous_timestamp,
                        parent_directory: d.parent_directory.clone(),
                        audio_file_name: d.audio_file_name.clone(),
                        cluster_id: clustering.and_then(|c| c.cluster_of(r)),
                        ground_truth: gt.as_ref().map(|g| {
                            (0..g.classes.len())
                                .filter(|&c| g.matrix[[r, c]])
                                .map(|c| g.classes[c].clone())
                                .collect()
                        }),
                    }
                })
                .collect();
            row += set.len();
            files.insert(
                set.file.clone(),
                FilePoints {
                    points: reduced_file.points.clone(),
                    timestamps: reduced_file.timestamps.clone(),
                    labels,
                },
            );
        }
        json(&EmbeddingsPayload {
            reducer,
            model: model.to_string(),
            cluster_target: clustering.map(|c| c.target.clone()),
            files,
        })
    }

    /// Validated slice of one file, decoded and resampled to `rate` (native
    /// rate when `None`).
    fn slice(&self, q: &SliceQuery, spec: Option<&ModelSpec>) -> Result<AudioBuffer, ApiError> {
        let audio_root = self.audio_root.as_ref().ok_or_else(|| {
            ApiError::new(
                StatusCode::CONFLICT,
                "audio detached: the service was started without an audio root",
            )
        })?;
        let file = q
            .file
            .as_deref()
            .ok_or_else(|| ApiError::bad_request("missing query parameter `file`"))?;
        let (start, end) = match (q.start, q.end) {
            (Some(s), Some(e)) => (s, e),
            _ => return Err(ApiError::bad_request("query parameters `start` and `end` are required")),
        };
        let entry = self
            .index
            .resolve_file(file)
            .ok_or_else(|| ApiError::not_found(format!("file {file:?} is not in the dataset")))?;
        let pad = spec.map_or(0.0, |s| s.window_s);
        let limit = entry.duration_s + pad;
        if !(start.is_finite() && end.is_finite() && start >= 0.0 && start < end && end <= limit + 1e-9) {
            return Err(ApiError::new(
                StatusCode::RANGE_NOT_SATISFIABLE,
                format!(
                    "interval [{start}, {end}) outside 0..{limit:.3} s of {}",
                    entry.rel_path
                ),
            ));
        }
        if end - start > MAX_SLICE_S {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                format!("slices are limited to {MAX_SLICE_S} s"),
            ));
        }
        let path = audio_root.join(&entry.rel_path);
        let buf = audio::decode(&path).map_err(|e| ApiError::internal(e.to_string()))?;
        let slice = buf.slice_padded(start, end);
        Ok(match spec {
            Some(s) => audio::resample(&slice, s.sample_rate),
            None => slice,
        })
    }

    pub fn spectrogram(&self, q: &SliceQuery, want_png: bool) -> Result<Reply, ApiError> {
        let spec = match &q.model {
            Some(m) => Some(self.spec(m)?),
            None if self.audio_root.is_none() => None,
            None => return Err(ApiError::bad_request("missing query parameter `model`")),
        };
        let buf = self.slice(q, spec.as_ref())?;
        let image = audio::spectrogram(&buf, DEFAULT_FFT_SIZE, DEFAULT_HOP, DEFAULT_FLOOR_DB)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        if want_png {
            Ok(Reply::Bytes {
                content_type: "image/png",
                body: render_png(&image)?,
            })
        } else {
            json(&image)
        }
    }

    pub fn audio(&self, q: &SliceQuery) -> Result<Reply, ApiError> {
        let spec = match &q.model {
            Some(m) => Some(self.spec(m)?),
            None => None,
        };
        let buf = self.slice(q, spec.as_ref())?;
        let body = audio::write_wav_f32(&buf).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Reply::Bytes {
            content_type: "audio/wav",
            body,
        })
    }

    fn required_model(&self, model: &Option<String>) -> Result<String, ApiError> {
        let model = model
            .clone()
            .ok_or_else(|| ApiError::bad_request("missing query parameter `model`"))?;
        self.spec(&model)?;
        Ok(model)
    }

    pub fn metrics(&self, kind: &str, q: &ModelQuery) -> Result<Reply, ApiError> {
        let files: &[(&str, &str)] = match kind {
            "clustering" => &[("clustering", CLUSTERING_FILE)],
            "probes" => &[("knn", PROBE_KNN_FILE), ("linear", PROBE_LINEAR_FILE)],
            "benchmark" => &[("benchmark", BENCHMARK_FILE)],
            other => {
                return Err(ApiError::not_found(format!(
                    "unknown metrics kind {other:?}; use clustering, probes or benchmark"
                )))
            }
        };
        let model = self.required_model(&q.model)?;
        let dir = self.layout(&model).evaluations_dir();
        let mut found = serde_json::Map::new();
        let mut missing = Vec::new();
        for (key, name) in files {
            let path = dir.join(name);
            match fs::read(&path) {
                Ok(bytes) => {
                    let v: Value = serde_json::from_slice(&bytes)
                        .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
                    found.insert((*key).to_string(), v);
                }
                Err(_) => missing.push(path.display().to_string()),
            }
        }
        if found.is_empty() {
            return Err(ApiError::not_found(format!(
                "no {kind} results for model {model}; run the corresponding evaluation task"
            ))
            .with_missing(missing));
        }
        if files.len() == 1 {
            let (_, v) = found.into_iter().next().expect("one entry");
            return Ok(Reply::Json(v));
        }
        Ok(Reply::Json(Value::Object(found)))
    }

    pub fn heatmap(&self, q: &HeatmapQuery) -> Result<Reply, ApiError> {
        let model = self.required_model(&q.model)?;
        let source_name = q.source.as_deref().unwrap_or("classifier");
        let source = PredictionSource::parse(source_name).ok_or_else(|| {
            ApiError::bad_request(format!(
                "unknown prediction source {source_name:?}; use classifier or linear_probe"
            ))
        })?;
        let path = self.layout(&model).combined_table_path(source.as_str());
        let text = fs::read_to_string(&path).map_err(|_| {
            ApiError::not_found(format!(
                "no {} predictions for model {model}; run the classification task",
                source.as_str()
            ))
            .with_missing(vec![path.display().to_string()])
        })?;
        let events =
            parse_raven_table(&text, None).map_err(|e| ApiError::internal(e.to_string()))?;
        let Some(class) = q.class.as_deref() else {
            let classes: BTreeSet<&str> = events.iter().map(|e| e.class.as_str()).collect();
            return Err(ApiError::bad_request(format!(
                "missing query parameter `class` (classes with events: {})",
                classes.into_iter().collect::<Vec<_>>().join(", ")
            )));
        };
        json(&heatmap(&events, &self.index, class))
    }

    /// Write the selection under `evaluations/selections/` and return its
    /// path relative to the dataset root.
    pub fn export(&self, req: &ExportRequest) -> Result<Reply, ApiError> {
        if req.points.is_empty() {
            return Err(ApiError::bad_request("selection is empty"));
        }
        let label = req.label.trim();
        if label.is_empty() {
            return Err(ApiError::bad_request("label must not be empty"));
        }
        let mut points = Vec::with_capacity(req.points.len());
        for p in &req.points {
            let entry = self
                .index
                .resolve_file(&p.file)
                .ok_or_else(|| ApiError::bad_request(format!("file {:?} is not in the dataset", p.file)))?;
            if !(p.start >= 0.0 && p.start < p.end) {
                return Err(ApiError::bad_request(format!(
                    "point on {} needs 0 <= start < end",
                    p.file
                )));
            }
            points.push((entry.rel_path.clone(), p.start, p.end));
        }
        let csv = export_selection(&points, label).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let stem: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let dir = self.layout("").selections_dir();
        let _guard = self.export_lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = (1..)
            .map(|n| dir.join(format!("{stem}_{n:03}.csv")))
            .find(|p| !p.exists())
            .expect("unbounded counter");
        atomic_write(&path, csv.as_bytes()).map_err(|e| ApiError::internal(e.to_string()))?;
        let rel = path
            .strip_prefix(&self.dataset_root)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        json(&ExportReply {
            path: rel,
            rows: points.len(),
        })
    }
}

fn ndarray_empty(rows: usize) -> ndarray::Array2<f32> {
    ndarray::Array2::zeros((rows, 0))
}

/// 8-bit grayscale, high frequencies at the top, floor black.
fn render_png(image: &SpectrogramImage) -> Result<Vec<u8>, ApiError> {
    let (bins, frames) = (image.n_bins(), image.n_frames());
    let floor = image.floor_db as f32;
    let mut pixels = Vec::with_capacity(bins * frames);
    for b in (0..bins).rev() {
        for t in 0..frames {
            let v = (image.matrix[[b, t]] - floor) / -floor;
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frames as u32, bins as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| ApiError::internal(e.to_string()))?;
        w.write_image_data(&pixels)
            .map_err(|e| ApiError::internal(e.to_string()))?;
    }
    Ok(out)
}
