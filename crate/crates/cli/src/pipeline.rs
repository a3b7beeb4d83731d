//! Run stages: prepare, embed, evaluate.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use chrono::Utc;
use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use sonoscope::audio::{self, decode, resample};
use sonoscope::backends::BackendError;
use sonoscope::config::{plan_run, record_run, ConfigError, LoadedConfig};
use sonoscope::dataset::{
    get_audio_files, layout_for, CacheState, DatasetError, FileIdentity, Scope, StackedEmbeddings,
};
use sonoscope::dimred::{reduce_and_persist, reducer_for, ReduceOutcome};
use sonoscope::eval::{
    benchmark, knn_probe, run_clustering_task, split, train_linear_probe,
    write_json, BenchmarkResult, EvalError, LinearProbe, ProbeData, ProbeHyperparams, BENCHMARK_FILE,
    CLUSTERING_FILE, DEFAULT_KNN_K, PROBE_KNN_FILE, PROBE_LINEAR_FILE,
};
use sonoscope::labels::{create_default_labels, ground_truth_by_model, parse_annotations, AnnotationTable};
use sonoscope::predictions::{read_raven_file, scores_to_events, write_raven_tables, PredictionSource};
use sonoscope::{ArtifactLayout, DatasetIndex, EvalTask, GroundTruthMatrix, ModelSpec, Registry, RunMetadata};
use tracing::{info, warn};

/// Segments per backend call.
pub const EMBED_BATCH: usize = 32;
/// Output dimension of the dashboard projection.
pub const REDUCED_DIM: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Missing(String),
    #[error("annotations: {0}")]
    Annotations(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Everything a stage needs about the current run.
pub struct Context {
    pub loaded: LoadedConfig,
    pub registry: Registry,
    pub dataset_root: PathBuf,
    pub index: DatasetIndex,
}

impl Context {
    /// Scan the audio folder, persist the index, clear leftovers of an
    /// interrupted run and record this run.
    pub fn prepare(loaded: LoadedConfig) -> Result<Self, PipelineError> {
        let registry = loaded.settings.registry()?;
        let dataset_root = loaded.settings.dataset_root(&loaded.config);
        let index = get_audio_files(&loaded.config.audio_dir)?;
        for s in &index.skipped {
            warn!(file = %s.rel_path, reason = %s.reason, "skipped audio file");
        }
        std::fs::create_dir_all(&dataset_root).map_err(|source| DatasetError::Io {
            path: dataset_root.clone(),
            source,
        })?;
        index.save(&dataset_root)?;
        let ctx = Self {
            loaded,
            registry,
            dataset_root,
            index,
        };
        let mut swept = 0;
        for model in &ctx.loaded.config.selected_models {
            swept += ctx.layout(model)?.sweep_temp_files();
        }
        if swept > 0 {
            info!(count = swept, "removed partial files from an interrupted run");
        }
        let record = record_run(&ctx.loaded.config, &ctx.loaded.settings)?;
        info!(timestamp = %record.timestamp, "run recorded");
        Ok(ctx)
    }

    /// Reopen a processed dataset from its artifacts alone.
    pub fn from_artifacts(loaded: LoadedConfig) -> Result<Self, PipelineError> {
        let registry = loaded.settings.registry()?;
        let dataset_root = loaded.settings.dataset_root(&loaded.config);
        let index = DatasetIndex::load(&dataset_root).map_err(|e| {
            PipelineError::Missing(format!(
                "no dataset index under {} ({e}); run `sonoscope embed` first",
                dataset_root.display()
            ))
        })?;
        Ok(Self {
            loaded,
            registry,
            dataset_root,
            index,
        })
    }

    pub fn models(&self) -> &[String] {
        &self.loaded.config.selected_models
    }

    pub fn spec(&self, model: &str) -> Result<&ModelSpec, PipelineError> {
        self.registry
            .get(model)
            .ok_or_else(|| PipelineError::Missing(format!("model {model} is not registered")))
    }

    pub fn layout(&self, model: &str) -> Result<ArtifactLayout, PipelineError> {
        let spec = self.spec(model)?;
        Ok(layout_for(&self.index, spec, &self.loaded.settings.output_root)?)
    }

    /// Models whose embeddings are missing for some files, with the counts.
    pub fn incomplete_models(&self) -> Vec<(String, usize)> {
        let cache = CacheState::scan(&self.dataset_root, self.models(), &self.index);
        self.models()
            .iter()
            .filter_map(|m| {
                let missing = self
                    .index
                    .files
                    .iter()
                    .filter(|e| !cache.is_complete(m, e))
                    .count();
                (missing > 0).then(|| (m.clone(), missing))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFailure {
    pub model: String,
    pub file: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbedReport {
    pub planned: usize,
    pub cached: usize,
    pub computed: usize,
    pub failed: Vec<TaskFailure>,
}

fn embed_one(
    handle: &mut sonoscope::BackendHandle,
    layout: &ArtifactLayout,
    audio_root: &Path,
    entry: &sonoscope::dataset::AudioFileEntry,
) -> Result<usize, String> {
    let spec = handle.spec().clone();
    let buf = decode(&audio_root.join(&entry.rel_path)).map_err(|e| e.to_string())?;
    let buf = resample(&buf, spec.sample_rate);
    let segments = audio::segment(&buf, spec.window_s).with_source(entry.rel_path.clone());
    let mut parts = Vec::new();
    for batch in segments.batches(EMBED_BATCH) {
        parts.push(handle.embed(&batch).map_err(|e| e.to_string())?);
    }
    let matrix = if parts.is_empty() {
        Array2::zeros((0, spec.embedding_dim))
    } else {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| e.to_string())?
    };
    let timestamps = segments.timestamps();
    layout
        .write_embeddings(&entry.rel_path, FileIdentity::of(entry), &matrix, &timestamps)
        .map_err(|e| e.to_string())?;
    Ok(timestamps.len())
}

/// Embed every file lacking a valid artifact, then refresh each complete
/// model's metadata.
pub fn embed(ctx: &Context) -> Result<EmbedReport, PipelineError> {
    let settings = &ctx.loaded.settings;
    let cache = CacheState::scan(&ctx.dataset_root, ctx.models(), &ctx.index);
    let plan = plan_run(&ctx.loaded.config, settings, &ctx.index, &cache);
    let total = ctx.models().len() * ctx.index.files.len();
    let mut report = EmbedReport {
        planned: plan.embedding.len(),
        cached: total - plan.embedding.len(),
        ..EmbedReport::default()
    };
    info!(
        tasks = report.planned,
        cached = report.cached,
        workers = settings.worker_count,
        "embedding plan"
    );
    let layouts: HashMap<String, ArtifactLayout> = ctx
        .models()
        .iter()
        .map(|m| Ok((m.clone(), ctx.layout(m)?)))
        .collect::<Result<_, PipelineError>>()?;

    let started = Utc::now();
    let workers = settings.worker_count.max(1);
    let handles: Vec<Mutex<HashMap<String, sonoscope::BackendHandle>>> =
        (0..workers).map(|_| Mutex::new(HashMap::new())).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Missing(format!("worker pool: {e}")))?;
    let audio_root = &ctx.loaded.config.audio_dir;
    let outcomes: Vec<Result<(), TaskFailure>> = pool.install(|| {
        plan.embedding
            .par_iter()
            .map(|task| {
                let fail = |error: String| TaskFailure {
                    model: task.model.clone(),
                    file: task.file.clone(),
                    error,
                };
                let t0 = Instant::now();
                let entry = ctx
                    .index
                    .get(&task.file)
                    .ok_or_else(|| fail("file vanished from the index".into()))?;
                let slot = rayon::current_thread_index().unwrap_or(0) % workers;
                let mut cache = handles[slot].lock().unwrap_or_else(|p| p.into_inner());
                if !cache.contains_key(&task.model) {
                    let h = ctx
                        .registry
                        .open(&task.model)
                        .map_err(|e: BackendError| fail(e.to_string()))?;
                    cache.insert(task.model.clone(), h);
                }
                let handle = cache.get_mut(&task.model).expect("handle inserted");
                match embed_one(handle, &layouts[&task.model], audio_root, entry) {
                    Ok(n) => {
                        info!(
                            model = %task.model,
                            file = %task.file,
                            segments = n,
                            ms = t0.elapsed().as_millis() as u64,
                            "embedded"
                        );
                        Ok(())
                    }
                    Err(e) => {
                        // a backend that failed mid-batch may be in a bad state
                        cache.remove(&task.model);
                        warn!(model = %task.model, file = %task.file, error = %e, "embedding failed");
                        Err(fail(e))
                    }
                }
            })
            .collect()
    });
    for o in outcomes {
        match o {
            Ok(()) => report.computed += 1,
            Err(f) => report.failed.push(f),
        }
    }
    let finished = Utc::now();

    let cache = CacheState::scan(&ctx.dataset_root, ctx.models(), &ctx.index);
    for model in ctx.models() {
        let layout = &layouts[model];
        let complete = ctx.index.files.iter().all(|e| cache.is_complete(model, e));
        let touched = plan.embedding.iter().any(|t| &t.model == model);
        if !complete || (!touched && layout.metadata_path().is_file()) {
            continue;
        }
        let spec = ctx.spec(model)?;
        let mut segment_count = 0;
        for e in &ctx.index.files {
            segment_count += layout.read_sidecar(&e.rel_path)?.timestamps.len();
        }
        layout.write_metadata(&RunMetadata {
            model: model.clone(),
            sample_rate: spec.sample_rate,
            window_s: spec.window_s,
            embedding_dim: spec.embedding_dim,
            file_count: ctx.index.files.len(),
            segment_count,
            total_duration_s: ctx.index.total_duration_s(),
            processing_start: started,
            processing_end: finished,
            config_snapshot: Some(ctx.loaded.clone()),
        })?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepStatus {
    Done(String),
    Skipped(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub model: String,
    pub task: EvalTask,
    pub status: StepStatus,
    pub ms: u64,
}

/// Loaded inputs for one model's evaluation.
struct ModelInputs<'a> {
    ctx: &'a Context,
    spec: ModelSpec,
    layout: ArtifactLayout,
    stacked: StackedEmbeddings,
    gt: Option<GroundTruthMatrix>,
}

fn eval_err(e: impl fmt::Display) -> String {
    e.to_string()
}

impl ModelInputs<'_> {
    fn eval_dir(&self) -> PathBuf {
        self.layout.evaluations_dir()
    }

    fn write_predictions(
        &self,
        source: PredictionSource,
        scores: &Array2<f32>,
        classes: &[String],
    ) -> Result<usize, String> {
        let thr = self.ctx.loaded.settings.detection_threshold;
        let mut per_file = Vec::with_capacity(self.stacked.sets.len());
        let mut row = 0;
        let mut count = 0;
        for set in &self.stacked.sets {
            let n = set.len();
            let view = scores.slice(s![row..row + n, ..]);
            let events =
                scores_to_events(&set.file, view, &set.timestamps, classes, thr).map_err(eval_err)?;
            count += events.len();
            per_file.push((set.file.clone(), events));
            row += n;
        }
        write_raven_tables(&self.layout, source, self.spec.sample_rate, &per_file).map_err(eval_err)?;
        Ok(count)
    }

    fn classify_with_probe(&self) -> Result<Option<String>, String> {
        let dir = self.eval_dir();
        if !LinearProbe::exists(&dir) {
            return Ok(None);
        }
        let probe = LinearProbe::load(&dir).map_err(eval_err)?;
        let scores = probe.scores(self.stacked.matrix.view()).mapv(|v| v as f32);
        let n = self.write_predictions(PredictionSource::LinearProbe, &scores, &probe.classes)?;
        Ok(Some(format!("{n} linear-probe events")))
    }

    fn classification(&self) -> StepStatus {
        let mut done = Vec::new();
        if self.spec.has_classifier {
            let result = self
                .ctx
                .registry
                .open(&self.spec.name)
                .and_then(|h| {
                    let scores = h.classify(&self.stacked.matrix)?;
                    Ok((scores, h.class_list()?.to_vec()))
                })
                .map_err(eval_err)
                .and_then(|(scores, classes)| {
                    self.write_predictions(PredictionSource::Classifier, &scores, &classes)
                });
            match result {
                Ok(n) => done.push(format!("{n} classifier events")),
                Err(e) => return StepStatus::Failed(e),
            }
        }
        match self.classify_with_probe() {
            Ok(Some(d)) => done.push(d),
            Ok(None) => {}
            Err(e) => return StepStatus::Failed(e),
        }
        if done.is_empty() {
            StepStatus::Skipped("model has no classifier and no trained linear probe".into())
        } else {
            StepStatus::Done(done.join(", "))
        }
    }

    fn reduction(&self) -> StepStatus {
        let s = &self.ctx.loaded.settings;
        let reducer = reducer_for(s.reducer, s.random_seed);
        match reduce_and_persist(&self.layout, &self.ctx.index, reducer.as_ref(), REDUCED_DIM) {
            Ok(ReduceOutcome::Written { files, points }) => {
                StepStatus::Done(format!("{} over {points} points, {files} files", s.reducer.as_str()))
            }
            Ok(ReduceOutcome::Cached) => StepStatus::Done(format!("{} cached", s.reducer.as_str())),
            Err(e) => StepStatus::Failed(e.to_string()),
        }
    }

    fn clustering(&self) -> StepStatus {
        let defaults = create_default_labels(&self.ctx.index, &self.stacked.sets);
        let seed = self.ctx.loaded.settings.random_seed;
        let report = match run_clustering_task(
            &self.spec.name,
            self.stacked.matrix.view(),
            &defaults,
            self.gt.as_ref(),
            seed,
        ) {
            Ok(r) => r,
            Err(e) => return StepStatus::Failed(e.to_string()),
        };
        for n in &report.notices {
            warn!(model = %self.spec.name, "{n}");
        }
        if let Err(e) = write_json(&self.eval_dir().join(CLUSTERING_FILE), &report) {
            return StepStatus::Failed(e.to_string());
        }
        let scores: Vec<String> = report
            .results
            .iter()
            .filter_map(|r| r.target_score().map(|s| format!("{}/{:?} ami {:.3}", r.target, r.scope, s.ami)))
            .collect();
        StepStatus::Done(scores.join("; "))
    }

    fn probing(&self, classify_after: bool) -> StepStatus {
        let Some(gt) = &self.gt else {
            return StepStatus::Skipped("no annotations configured".into());
        };
        let s = &self.ctx.loaded.settings;
        let run = || -> Result<String, EvalError> {
            let outcome = split(gt, s.probe_split, s.random_seed)?;
            let x = self.stacked.matrix.view();
            let knn = knn_probe(&self.spec.name, ProbeData::new(x, gt, &outcome), DEFAULT_KNN_K)?;
            write_json(&self.eval_dir().join(PROBE_KNN_FILE), &knn)?;
            let (probe, linear) = train_linear_probe(
                &self.spec.name,
                ProbeData::new(x, gt, &outcome),
                &ProbeHyperparams::default(),
            )?;
            probe.save(&self.eval_dir())?;
            write_json(&self.eval_dir().join(PROBE_LINEAR_FILE), &linear)?;
            for n in knn.notices.iter().chain(&linear.notices) {
                warn!(model = %self.spec.name, "{n}");
            }
            Ok(format!(
                "knn mAP {:.3}, linear mAP {:.3}",
                knn.map_score, linear.map_score
            ))
        };
        match run() {
            Ok(mut d) => {
                if classify_after {
                    match self.classify_with_probe() {
                        Ok(Some(p)) => d.push_str(&format!(", {p}")),
                        Ok(None) => {}
                        Err(e) => return StepStatus::Failed(e),
                    }
                }
                StepStatus::Done(d)
            }
            Err(e) => StepStatus::Failed(e.to_string()),
        }
    }

    fn benchmarking(&self) -> StepStatus {
        let Some(gt) = &self.gt else {
            return StepStatus::Skipped("no annotations configured".into());
        };
        if !self.spec.has_classifier {
            return StepStatus::Skipped("model has no native classifier".into());
        }
        let path = self.layout.combined_table_path(PredictionSource::Classifier.as_str());
        if !path.is_file() {
            return StepStatus::Skipped(format!(
                "no classifier predictions at {}; enable the classification task",
                path.display()
            ));
        }
        let classes = self.spec.class_list.clone().unwrap_or_default();
        let result = read_raven_file(&path, None).map_err(eval_err).and_then(|events| {
            benchmark(
                &self.spec.name,
                PredictionSource::Classifier.as_str(),
                &events,
                &classes,
                gt,
                &self.stacked.sets,
            )
            .map_err(|e| match e {
                EvalError::NoClassOverlap { .. } => format!("skip: {e}"),
                other => other.to_string(),
            })
        });
        match result {
            Ok(r) => {
                if let Err(e) = write_json(&self.eval_dir().join(BENCHMARK_FILE), &r) {
                    return StepStatus::Failed(e.to_string());
                }
                StepStatus::Done(format!(
                    "mAP {:.3} over {} classes",
                    r.map_score,
                    r.evaluated_classes.len()
                ))
            }
            Err(e) if e.starts_with("skip: ") => StepStatus::Skipped(e[6..].to_string()),
            Err(e) => StepStatus::Failed(e),
        }
    }
}

/// The configured annotation table, if any.
pub fn load_annotations(ctx: &Context) -> Result<Option<AnnotationTable>, PipelineError> {
    let Some(path) = &ctx.loaded.settings.annotations_path else {
        return Ok(None);
    };
    let table = parse_annotations(path).map_err(|e| PipelineError::Annotations(e.to_string()))?;
    let unmatched = table.unmatched(&ctx.index);
    if !unmatched.is_empty() {
        warn!(
            count = unmatched.len(),
            first = %unmatched[0],
            "annotations reference files outside the dataset"
        );
    }
    Ok(Some(table))
}

fn load_inputs<'a>(
    ctx: &'a Context,
    model: &str,
    table: Option<&AnnotationTable>,
) -> Result<ModelInputs<'a>, String> {
    let spec = ctx.spec(model).map_err(eval_err)?.clone();
    let layout = ctx.layout(model).map_err(eval_err)?;
    let sets = layout
        .read_embeddings(Scope::Dataset, &ctx.index)
        .map_err(eval_err)?;
    let stacked = StackedEmbeddings::stack(sets, spec.embedding_dim);
    let gt = table.map(|t| {
        ground_truth_by_model(t, &ctx.index, &stacked.sets, ctx.loaded.settings.overlap_threshold)
    });
    Ok(ModelInputs {
        ctx,
        spec,
        layout,
        stacked,
        gt,
    })
}

/// Run the configured evaluation tasks for every model with complete
/// embeddings.
pub fn evaluate(ctx: &Context, tasks: &[EvalTask]) -> Result<Vec<StepReport>, PipelineError> {
    let table = load_annotations(ctx)?;
    let incomplete: HashMap<String, usize> = ctx.incomplete_models().into_iter().collect();
    let ordered: Vec<EvalTask> = EvalTask::ALL.into_iter().filter(|t| tasks.contains(t)).collect();
    let mut reports = Vec::new();
    for model in ctx.models() {
        let report = |task, status, ms| StepReport {
            model: model.clone(),
            task,
            status,
            ms,
        };
        if let Some(n) = incomplete.get(model) {
            for &t in &ordered {
                reports.push(report(
                    t,
                    StepStatus::Skipped(format!("embeddings missing for {n} files")),
                    0,
                ));
            }
            continue;
        }
        let inputs = match load_inputs(ctx, model, table.as_ref()) {
            Ok(i) => i,
            Err(e) => {
                for &t in &ordered {
                    reports.push(report(t, StepStatus::Failed(e.clone()), 0));
                }
                continue;
            }
        };
        for &task in &ordered {
            let t0 = Instant::now();
            let status = match task {
                EvalTask::Classification => inputs.classification(),
                EvalTask::Reduction => inputs.reduction(),
                EvalTask::Clustering => inputs.clustering(),
                EvalTask::Probing => inputs.probing(ordered.contains(&EvalTask::Classification)),
                EvalTask::Benchmarking => inputs.benchmarking(),
            };
            let ms = t0.elapsed().as_millis() as u64;
            match &status {
                StepStatus::Done(d) => info!(model = %model, task = task.as_str(), ms, "{d}"),
                StepStatus::Skipped(r) => info!(model = %model, task = task.as_str(), "skipped: {r}"),
                StepStatus::Failed(e) => warn!(model = %model, task = task.as_str(), "failed: {e}"),
            }
            reports.push(report(task, status, ms));
        }
    }
    Ok(reports)
}

/// Benchmark a Raven table against `model`'s segment grid and annotations.
pub fn benchmark_table(
    ctx: &Context,
    model: &str,
    table_path: &Path,
    source: &str,
) -> Result<BenchmarkResult, PipelineError> {
    let annotations = load_annotations(ctx)?
        .ok_or_else(|| PipelineError::Missing("benchmarking needs annotations_path".into()))?;
    let inputs = load_inputs(ctx, model, Some(&annotations)).map_err(PipelineError::Missing)?;
    let events = read_raven_file(table_path, None).map_err(|e| PipelineError::Missing(e.to_string()))?;
    let mut classes: Vec<String> = events.iter().map(|e| e.class.clone()).collect();
    classes.sort();
    classes.dedup();
    let gt = inputs.gt.as_ref().expect("annotations loaded");
    benchmark(model, source, &events, &classes, gt, &inputs.stacked.sets)
        .map_err(|e| PipelineError::Missing(e.to_string()))
}

/// Totals printed at the end of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub embedding: Option<EmbedReport>,
    pub steps: Vec<StepReport>,
    pub skipped_files: usize,
}

impl RunSummary {
    pub fn has_failures(&self) -> bool {
        self.embedding.as_ref().is_some_and(|e| !e.failed.is_empty())
            || self.steps.iter().any(|s| matches!(s.status, StepStatus::Failed(_)))
    }

    fn count(&self, f: fn(&StepStatus) -> bool) -> usize {
        self.steps.iter().filter(|s| f(&s.status)).count()
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "summary")?;
        if let Some(e) = &self.embedding {
            writeln!(
                f,
                "  embedding: planned {}, computed {}, cached {}, failed {}",
                e.planned,
                e.computed,
                e.cached,
                e.failed.len()
            )?;
            for t in &e.failed {
                writeln!(f, "    failed {} {}: {}", t.model, t.file, t.error)?;
            }
        }
        if self.skipped_files > 0 {
            writeln!(f, "  audio files skipped: {}", self.skipped_files)?;
        }
        if !self.steps.is_empty() {
            writeln!(
                f,
                "  evaluation: done {}, skipped {}, failed {}",
                self.count(|s| matches!(s, StepStatus::Done(_))),
                self.count(|s| matches!(s, StepStatus::Skipped(_))),
                self.count(|s| matches!(s, StepStatus::Failed(_)))
            )?;
            for s in &self.steps {
                let (tag, text) = match &s.status {
                    StepStatus::Done(d) => ("done", d),
                    StepStatus::Skipped(r) => ("skipped", r),
                    StepStatus::Failed(e) => ("failed", e),
                };
                writeln!(f, "    {} {} {tag}: {text}", s.model, s.task.as_str())?;
            }
        }
        Ok(())
    }
}
