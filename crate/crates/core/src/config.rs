//! Run configuration, run records and work planning.
//!
//! Two flat YAML documents drive a run:
//!
//! * the config file: `audio_dir`, `selected_models`, `evaluation_tasks`,
//!   `dashboard`;
//! * the settings file (`settings.yaml` next to the config unless given
//!   explicitly): `device`, `worker_count`, `output_root`, `annotations_path`,
//!   `probe_split`, `random_seed`, `overlap_threshold`, `detection_threshold`,
//!   `reducer`, `external_backends`.
//!
//! Only `audio_dir` and `selected_models` are required. Unknown keys are
//! errors. Relative paths resolve against the directory of the file that
//! names them; override paths resolve against the working directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Duration as ChronoDuration, NaiveDateTime, SubsecRound, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::backends::{BackendKind, ModelSpec, Registry, DEFAULT_BATCH_DEADLINE};
use crate::dataset::{CacheState, DatasetIndex};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {0} does not exist")]
    Missing(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid YAML: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("unknown key `{key}`{hint}")]
    UnknownKey { key: String, hint: String },
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("missing required key `{0}`")]
    Required(&'static str),
    #[error("model {name:?} is not registered (known: {known})")]
    UnknownModel { name: String, known: String },
    #[error("cannot write run record under {path}: {source}")]
    Record {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn invalid(key: &str, reason: impl Into<String>) -> Self {
        Self::Invalid {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Classification,
    Reduction,
    Clustering,
    Probing,
    Benchmarking,
}

impl EvalTask {
    pub const ALL: [EvalTask; 5] = [
        EvalTask::Classification,
        EvalTask::Reduction,
        EvalTask::Clustering,
        EvalTask::Probing,
        EvalTask::Benchmarking,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalTask::Classification => "classification",
            EvalTask::Reduction => "reduction",
            EvalTask::Clustering => "clustering",
            EvalTask::Probing => "probing",
            EvalTask::Benchmarking => "benchmarking",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Gpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReducerKind {
    Pca,
    Tsne,
}

impl ReducerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReducerKind::Pca => "pca",
            ReducerKind::Tsne => "tsne",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub audio_dir: PathBuf,
    pub selected_models: Vec<String>,
    pub evaluation_tasks: Vec<EvalTask>,
    pub dashboard: bool,
}

impl RunConfig {
    /// Top-level audio folder name; names the dataset's artifact tree.
    pub fn dataset_name(&self) -> String {
        dataset_name(&self.audio_dir)
    }

    pub fn wants(&self, task: EvalTask) -> bool {
        self.evaluation_tasks.contains(&task)
    }
}

pub(crate) fn dataset_name(audio_dir: &Path) -> String {
    audio_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

/// A model served by a child process, registered at startup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalBackendConfig {
    pub name: String,
    pub command: Vec<String>,
    pub sample_rate: u32,
    pub window_s: f64,
    pub embedding_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub device: Device,
    pub worker_count: usize,
    pub output_root: PathBuf,
    pub annotations_path: Option<PathBuf>,
    pub probe_split: [f64; 3],
    pub random_seed: u64,
    pub overlap_threshold: f64,
    pub detection_threshold: f64,
    pub reducer: ReducerKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub external_backends: Vec<ExternalBackendConfig>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            device: Device::Cpu,
            worker_count: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            output_root: PathBuf::from("results"),
            annotations_path: None,
            probe_split: [0.7, 0.15, 0.15],
            random_seed: 42,
            overlap_threshold: 0.5,
            detection_threshold: 0.5,
            reducer: ReducerKind::Tsne,
            external_backends: Vec::new(),
        }
    }
}

impl Settings {
    /// Registry with the built-in backends plus configured external ones.
    pub fn registry(&self) -> Result<Registry, ConfigError> {
        let mut reg = Registry::with_defaults();
        for ext in &self.external_backends {
            let spec = ModelSpec {
                name: ext.name.clone(),
                sample_rate: ext.sample_rate,
                window_s: ext.window_s,
                embedding_dim: ext.embedding_dim,
                has_classifier: false,
                class_list: None,
            };
            let deadline = ext
                .deadline_s
                .map(Duration::from_secs_f64)
                .unwrap_or(DEFAULT_BATCH_DEADLINE);
            reg.register(
                spec,
                BackendKind::External {
                    command: ext.command.clone(),
                    deadline,
                },
            )
            .map_err(|e| ConfigError::invalid("external_backends", e.to_string()))?;
        }
        Ok(reg)
    }

    /// Root of one dataset's artifact tree.
    pub fn dataset_root(&self, config: &RunConfig) -> PathBuf {
        self.output_root.join(config.dataset_name())
    }
}

/// Validated configuration plus settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub settings: Settings,
}

pub type Overrides = BTreeMap<String, String>;

const CONFIG_KEYS: [&str; 4] = ["audio_dir", "selected_models", "evaluation_tasks", "dashboard"];
const SETTINGS_KEYS: [&str; 10] = [
    "device",
    "worker_count",
    "output_root",
    "annotations_path",
    "probe_split",
    "random_seed",
    "overlap_threshold",
    "detection_threshold",
    "reducer",
    "external_backends",
];
const PATH_KEYS: [&str; 3] = ["audio_dir", "output_root", "annotations_path"];

fn read_mapping(path: &Path) -> Result<Mapping, ConfigError> {
    if !path.exists() {
        return Err(ConfigError::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if text.trim().is_empty() {
        return Ok(Mapping::new());
    }
    match serde_yaml::from_str::<Value>(&text) {
        Ok(Value::Mapping(m)) => Ok(m),
        Ok(Value::Null) => Ok(Mapping::new()),
        Ok(_) => Err(ConfigError::Parse {
            path: path.to_path_buf(),
            reason: "top level must be a mapping".into(),
        }),
        Err(e) => Err(ConfigError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
    }
}

fn typed<T: DeserializeOwned>(key: &str, value: Value) -> Result<T, ConfigError> {
    serde_yaml::from_value(value).map_err(|e| ConfigError::invalid(key, e.to_string()))
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Accumulates key/value pairs from files and overrides before validation.
#[derive(Default)]
struct Builder {
    audio_dir: Option<PathBuf>,
    selected_models: Option<Vec<String>>,
    evaluation_tasks: Option<Vec<EvalTask>>,
    dashboard: Option<bool>,
    settings: Settings,
}

impl Builder {
    fn apply(&mut self, key: &str, value: Value, base: &Path) -> Result<(), ConfigError> {
        let path = |v: Value| -> Result<PathBuf, ConfigError> {
            let p: PathBuf = match v {
                Value::String(s) => PathBuf::from(s),
                other => return Err(ConfigError::invalid(key, format!("expected a path, got {other:?}"))),
            };
            Ok(resolve(base, p))
        };
        match key {
            "audio_dir" => self.audio_dir = Some(path(value)?),
            "selected_models" => {
                let models = match value {
                    Value::String(s) => vec![s],
                    v => typed::<Vec<String>>(key, v)?,
                };
                self.selected_models = Some(models);
            }
            "evaluation_tasks" => {
                self.evaluation_tasks = Some(match value {
                    Value::Null => Vec::new(),
                    v => typed(key, v)?,
                })
            }
            "dashboard" => self.dashboard = Some(typed(key, value)?),
            "device" => self.settings.device = typed(key, value)?,
            "worker_count" => self.settings.worker_count = typed(key, value)?,
            "output_root" => self.settings.output_root = path(value)?,
            "annotations_path" => {
                self.settings.annotations_path = match value {
                    Value::Null => None,
                    Value::String(s) if s.is_empty() || s == "none" => None,
                    v => Some(path(v)?),
                }
            }
            "probe_split" => self.settings.probe_split = typed(key, value)?,
            "random_seed" => self.settings.random_seed = typed(key, value)?,
            "overlap_threshold" => self.settings.overlap_threshold = typed(key, value)?,
            "detection_threshold" => self.settings.detection_threshold = typed(key, value)?,
            "reducer" => self.settings.reducer = typed(key, value)?,
            "external_backends" => {
                let mut list: Vec<ExternalBackendConfig> = match value {
                    Value::Null => Vec::new(),
                    v => typed(key, v)?,
                };
                for ext in &mut list {
                    // a bare program name is looked up on PATH; anything with a
                    // separator is a path relative to the file
                    if let Some(program) = ext.command.first_mut() {
                        if program.contains('/') && !Path::new(program.as_str()).is_absolute() {
                            *program = resolve(base, PathBuf::from(program.as_str()))
                                .to_string_lossy()
                                .into_owned();
                        }
                    }
                }
                self.settings.external_backends = list;
            }
            other => {
                return Err(ConfigError::UnknownKey {
                    key: other.to_string(),
                    hint: String::new(),
                })
            }
        }
        Ok(())
    }

    fn apply_mapping(
        &mut self,
        map: Mapping,
        allowed: &[&str],
        other_file: &str,
        base: &Path,
    ) -> Result<(), ConfigError> {
        for (k, v) in map {
            let key = match k {
                Value::String(s) => s,
                other => {
                    return Err(ConfigError::UnknownKey {
                        key: format!("{other:?}"),
                        hint: String::new(),
                    })
                }
            };
            if !allowed.contains(&key.as_str()) {
                let known_elsewhere =
                    CONFIG_KEYS.contains(&key.as_str()) || SETTINGS_KEYS.contains(&key.as_str());
                return Err(ConfigError::UnknownKey {
                    hint: if known_elsewhere {
                        format!(" (belongs in the {other_file} file)")
                    } else {
                        String::new()
                    },
                    key,
                });
            }
            self.apply(&key, v, base)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<LoadedConfig, ConfigError> {
        let config = RunConfig {
            audio_dir: self.audio_dir.ok_or(ConfigError::Required("audio_dir"))?,
            selected_models: self
                .selected_models
                .ok_or(ConfigError::Required("selected_models"))?,
            evaluation_tasks: self.evaluation_tasks.unwrap_or_else(|| {
                vec![
                    EvalTask::Classification,
                    EvalTask::Reduction,
                    EvalTask::Clustering,
                ]
            }),
            dashboard: self.dashboard.unwrap_or(true),
        };
        let loaded = LoadedConfig {
            config,
            settings: self.settings,
        };
        validate(&loaded)?;
        Ok(loaded)
    }
}

fn override_value(key: &str, raw: &str) -> Result<Value, ConfigError> {
    let raw = raw.trim();
    fn list(raw: &str) -> Vec<&str> {
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect()
    }
    Ok(match key {
        _ if PATH_KEYS.contains(&key) => Value::String(raw.to_string()),
        "selected_models" | "evaluation_tasks" if !raw.starts_with('[') => Value::Sequence(
            list(raw)
                .into_iter()
                .map(|s| Value::String(s.to_string()))
                .collect(),
        ),
        "probe_split" if !raw.starts_with('[') => {
            let mut seq = Vec::new();
            for part in list(raw) {
                let f: f64 = part
                    .parse()
                    .map_err(|_| ConfigError::invalid(key, format!("{part:?} is not a number")))?;
                seq.push(Value::from(f));
            }
            Value::Sequence(seq)
        }
        _ => serde_yaml::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    })
}

fn validate(loaded: &LoadedConfig) -> Result<(), ConfigError> {
    let c = &loaded.config;
    let s = &loaded.settings;
    if !c.audio_dir.is_dir() {
        return Err(ConfigError::invalid(
            "audio_dir",
            format!("{} is not an existing directory", c.audio_dir.display()),
        ));
    }
    if c.selected_models.is_empty() {
        return Err(ConfigError::invalid("selected_models", "at least one model is required"));
    }
    if s.worker_count < 1 {
        return Err(ConfigError::invalid("worker_count", "must be >= 1"));
    }
    if s.probe_split.iter().any(|f| f.is_nan() || *f <= 0.0) {
        return Err(ConfigError::invalid("probe_split", "every fraction must be > 0"));
    }
    let sum: f64 = s.probe_split.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(ConfigError::invalid(
            "probe_split",
            format!("fractions sum to {sum}, expected 1"),
        ));
    }
    if !(s.overlap_threshold > 0.0 && s.overlap_threshold <= 1.0) {
        return Err(ConfigError::invalid("overlap_threshold", "must be in (0, 1]"));
    }
    if !(s.detection_threshold > 0.0 && s.detection_threshold < 1.0) {
        return Err(ConfigError::invalid("detection_threshold", "must be in (0, 1)"));
    }
    let registry = s.registry()?;
    for name in &c.selected_models {
        if !registry.contains(name) {
            return Err(ConfigError::UnknownModel {
                name: name.clone(),
                known: registry
                    .list()
                    .iter()
                    .map(|m| m.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
    }
    Ok(())
}

fn is_run_record(map: &Mapping) -> bool {
    ["timestamp", "config", "settings"]
        .iter()
        .all(|k| map.contains_key(Value::String((*k).to_string())))
}

/// Load a config file (or a run record, which replays its snapshot), the
/// sibling `settings.yaml` if present, then apply `overrides`.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<LoadedConfig, ConfigError> {
    let sibling = path
        .parent()
        .map(|p| p.join("settings.yaml"))
        .filter(|p| p.is_file());
    load_config_with_settings(path, sibling.as_deref(), overrides)
}

pub fn load_config_with_settings(
    path: &Path,
    settings_path: Option<&Path>,
    overrides: &Overrides,
) -> Result<LoadedConfig, ConfigError> {
    let map = read_mapping(path)?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let base = base.canonicalize().unwrap_or(base);
    let mut builder = Builder::default();

    if is_run_record(&map) {
        let record: RunRecord =
            serde_yaml::from_value(Value::Mapping(map)).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        builder.audio_dir = Some(record.config.audio_dir);
        builder.selected_models = Some(record.config.selected_models);
        builder.evaluation_tasks = Some(record.config.evaluation_tasks);
        builder.dashboard = Some(record.config.dashboard);
        builder.settings = record.settings;
    } else {
        builder.apply_mapping(map, &CONFIG_KEYS, "settings", &base)?;
        if let Some(sp) = settings_path {
            let smap = read_mapping(sp)?;
            let sbase = sp
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let sbase = sbase.canonicalize().unwrap_or(sbase);
            builder.apply_mapping(smap, &SETTINGS_KEYS, "config", &sbase)?;
        }
        builder.settings.output_root = resolve(&base, builder.settings.output_root.clone());
    }

    apply_overrides(&mut builder, overrides)?;
    builder.finish()
}

/// Build a config from flags alone, with an optional settings file.
pub fn config_from_overrides(
    settings_path: Option<&Path>,
    overrides: &Overrides,
) -> Result<LoadedConfig, ConfigError> {
    let mut builder = Builder::default();
    if let Some(sp) = settings_path {
        let smap = read_mapping(sp)?;
        let sbase = sp
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let sbase = sbase.canonicalize().unwrap_or(sbase);
        builder.apply_mapping(smap, &SETTINGS_KEYS, "config", &sbase)?;
    }
    let cwd = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
    builder.settings.output_root = resolve(&cwd, builder.settings.output_root.clone());
    apply_overrides(&mut builder, overrides)?;
    builder.finish()
}

fn apply_overrides(builder: &mut Builder, overrides: &Overrides) -> Result<(), ConfigError> {
    let cwd = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
    for (key, raw) in overrides {
        let key = key.replace('-', "_");
        if !CONFIG_KEYS.contains(&key.as_str()) && !SETTINGS_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey {
                key,
                hint: " (override)".into(),
            });
        }
        let value = override_value(&key, raw)?;
        builder.apply(&key, value, &cwd)?;
    }
    Ok(())
}

/// One execution's timestamped configuration snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub timestamp: DateTime<Utc>,
    pub tool_version: String,
    pub config: RunConfig,
    pub settings: Settings,
}

const RECORD_PREFIX: &str = "run_";
const RECORD_TIME_FORMAT: &str = "%Y%m%dT%H%M%S%.6fZ";

fn record_timestamp(name: &str) -> Option<DateTime<Utc>> {
    let stem = name.strip_prefix(RECORD_PREFIX)?.strip_suffix(".yaml")?;
    NaiveDateTime::parse_from_str(stem, RECORD_TIME_FORMAT)
        .ok()
        .map(|n| n.and_utc())
}

/// Directory holding run records for this config's dataset.
pub fn log_dir(config: &RunConfig, settings: &Settings) -> PathBuf {
    settings.dataset_root(config).join("logs")
}

/// Previously written run records, oldest first.
pub fn list_run_records(config: &RunConfig, settings: &Settings) -> Vec<PathBuf> {
    let dir = log_dir(config, settings);
    let mut found: Vec<(DateTime<Utc>, PathBuf)> = fs::read_dir(&dir)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            record_timestamp(&name).map(|t| (t, e.path()))
        })
        .collect();
    found.sort();
    found.into_iter().map(|(_, p)| p).collect()
}

/// Write a new run record named by its ISO-8601 timestamp. Timestamps are
/// strictly increasing within one output root; records are never overwritten.
pub fn record_run(config: &RunConfig, settings: &Settings) -> Result<RunRecord, ConfigError> {
    let dir = log_dir(config, settings);
    let err = |source| ConfigError::Record {
        path: dir.clone(),
        source,
    };
    fs::create_dir_all(&dir).map_err(err)?;
    let last = list_run_records(config, settings)
        .last()
        .and_then(|p| p.file_name().and_then(|n| record_timestamp(&n.to_string_lossy())));
    let mut ts = Utc::now().trunc_subsecs(6);
    if let Some(last) = last {
        if ts <= last {
            ts = last + ChronoDuration::microseconds(1);
        }
    }
    loop {
        let record = RunRecord {
            timestamp: ts,
            tool_version: crate::TOOL_VERSION.to_string(),
            config: config.clone(),
            settings: settings.clone(),
        };
        let path = dir.join(format!(
            "{RECORD_PREFIX}{}.yaml",
            ts.format(RECORD_TIME_FORMAT)
        ));
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let text = serde_yaml::to_string(&record).expect("record serializes");
                file.write_all(text.as_bytes()).map_err(err)?;
                return Ok(record);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                ts += ChronoDuration::microseconds(1);
            }
            Err(e) => return Err(err(e)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmbeddingTask {
    pub model: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvaluationStep {
    pub model: String,
    pub task: EvalTask,
}

/// Outstanding work: embedding tasks first, then evaluation steps.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct RunPlan {
    pub embedding: Vec<EmbeddingTask>,
    pub evaluation: Vec<EvaluationStep>,
}

/// Plan the (model, file) pairs whose artifacts are missing or stale, then
/// the configured evaluations per model.
pub fn plan_run(
    config: &RunConfig,
    _settings: &Settings,
    index: &DatasetIndex,
    cache: &CacheState,
) -> RunPlan {
    let mut plan = RunPlan::default();
    for model in &config.selected_models {
        for entry in &index.files {
            if !cache.is_complete(model, entry) {
                plan.embedding.push(EmbeddingTask {
                    model: model.clone(),
                    file: entry.rel_path.clone(),
                });
            }
        }
    }
    for model in &config.selected_models {
        for task in EvalTask::ALL {
            if config.wants(task) {
                plan.evaluation.push(EvaluationStep {
                    model: model.clone(),
                    task,
                });
            }
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AudioFileEntry, FileIdentity};

    struct Fixture {
        dir: tempfile::TempDir,
    }

    impl Fixture {
        fn new(config: &str) -> Self {
            let dir = tempfile::tempdir().unwrap();
            fs::create_dir_all(dir.path().join("data")).unwrap();
            fs::write(dir.path().join("config.yaml"), config).unwrap();
            Self { dir }
        }

        fn path(&self) -> PathBuf {
            self.dir.path().join("config.yaml")
        }

        fn settings(&self, text: &str) {
            fs::write(self.dir.path().join("settings.yaml"), text).unwrap();
        }
    }

    const MINIMAL: &str = "audio_dir: ./data\nselected_models: [mel-small]\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let fx = Fixture::new(MINIMAL);
        let loaded = load_config(&fx.path(), &Overrides::new()).unwrap();
        assert_eq!(loaded.config.selected_models, vec!["mel-small"]);
        assert!(loaded.config.audio_dir.ends_with("data"));
        assert!(loaded.config.dashboard);
        assert_eq!(loaded.settings.probe_split, [0.7, 0.15, 0.15]);
        assert_eq!(loaded.settings.reducer, ReducerKind::Tsne);
        assert!(loaded.settings.output_root.is_absolute());
    }

    #[test]
    fn override_wins_over_file() {
        let fx = Fixture::new(MINIMAL);
        let mut o = Overrides::new();
        o.insert("selected_models".into(), "mel-large".into());
        let loaded = load_config(&fx.path(), &o).unwrap();
        assert_eq!(loaded.config.selected_models, vec!["mel-large"]);
        assert_eq!(fs::read_to_string(fx.path()).unwrap(), MINIMAL);
    }

    #[test]
    fn bad_probe_split_names_key() {
        let fx = Fixture::new(MINIMAL);
        fx.settings("probe_split: [0.5, 0.5, 0.5]\n");
        let err = load_config(&fx.path(), &Overrides::new()).unwrap_err();
        assert!(err.to_string().contains("probe_split"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let fx = Fixture::new("audio_dir: ./data\nselected_models: [mel-small]\nmodles: x\n");
        let err = load_config(&fx.path(), &Overrides::new()).unwrap_err();
        assert!(err.to_string().contains("modles"), "{err}");

        let fx = Fixture::new(MINIMAL);
        fx.settings("reducer: umap\n");
        let err = load_config(&fx.path(), &Overrides::new()).unwrap_err();
        assert!(err.to_string().contains("reducer"), "{err}");

        let fx = Fixture::new(MINIMAL);
        let mut o = Overrides::new();
        o.insert("bogus".into(), "1".into());
        let err = load_config(&fx.path(), &o).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }));
    }

    #[test]
    fn unknown_model_and_missing_file() {
        let fx = Fixture::new("audio_dir: ./data\nselected_models: [birdnet]\n");
        let err = load_config(&fx.path(), &Overrides::new()).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownModel { .. }));
        let err = load_config(Path::new("/nonexistent/config.yaml"), &Overrides::new()).unwrap_err();
        assert!(matches!(err, ConfigError::Missing(_)));
    }

    #[test]
    fn audio_dir_must_exist() {
        let fx = Fixture::new("audio_dir: ./nope\nselected_models: [mel-small]\n");
        let err = load_config(&fx.path(), &Overrides::new()).unwrap_err();
        assert!(err.to_string().contains("audio_dir"));
    }

    #[test]
    fn run_records_increase_and_replay() {
        let fx = Fixture::new(MINIMAL);
        fx.settings("output_root: ./out\nrandom_seed: 7\n");
        let mut o = Overrides::new();
        o.insert("worker_count".into(), "3".into());
        let loaded = load_config(&fx.path(), &o).unwrap();
        let a = record_run(&loaded.config, &loaded.settings).unwrap();
        let b = record_run(&loaded.config, &loaded.settings).unwrap();
        assert!(b.timestamp > a.timestamp);
        assert_eq!(a.settings.worker_count, 3);

        let records = list_run_records(&loaded.config, &loaded.settings);
        assert_eq!(records.len(), 2);
        let replayed = load_config(&records[0], &Overrides::new()).unwrap();
        assert_eq!(replayed, loaded);
    }

    fn entry(rel: &str, mtime: i64) -> AudioFileEntry {
        AudioFileEntry {
            rel_path: rel.into(),
            size: 100,
            mtime,
            duration_s: 1.0,
            sample_rate: 16_000,
        }
    }

    #[test]
    fn planning_is_incremental() {
        let fx = Fixture::new("audio_dir: ./data\nselected_models: [mel-small, mel-large]\nevaluation_tasks: [clustering]\n");
        let loaded = load_config(&fx.path(), &Overrides::new()).unwrap();
        let mut index = DatasetIndex {
            dataset_name: "data".into(),
            files: vec![entry("a.wav", 1), entry("b.wav", 1)],
            skipped: vec![],
        };
        let mut cache = CacheState::default();
        let plan = plan_run(&loaded.config, &loaded.settings, &index, &cache);
        assert_eq!(plan.embedding.len(), 4);
        assert_eq!(plan.evaluation.len(), 2);
        assert_eq!(plan, plan_run(&loaded.config, &loaded.settings, &index, &cache));

        for t in &plan.embedding {
            let e = index.files.iter().find(|e| e.rel_path == t.file).unwrap();
            cache.insert(&t.model, &t.file, FileIdentity::of(e));
        }
        assert!(plan_run(&loaded.config, &loaded.settings, &index, &cache)
            .embedding
            .is_empty());

        index.files.push(entry("c.wav", 5));
        let plan = plan_run(&loaded.config, &loaded.settings, &index, &cache);
        assert_eq!(plan.embedding.len(), 2);
        assert!(plan.embedding.iter().all(|t| t.file == "c.wav"));

        // touching a file invalidates its artifacts
        index.files[0].mtime = 2;
        let plan = plan_run(&loaded.config, &loaded.settings, &index, &cache);
        assert!(plan.embedding.iter().any(|t| t.file == "a.wav"));
    }
}
