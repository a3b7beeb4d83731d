//! Feature-extractor registry and backends.
//!
//! A backend turns fixed-length frames at its declared sample rate into
//! embedding rows of its declared width. Two deterministic log-mel reference
//! backends ship built in; real models are attached through the external
//! process protocol in [`external`].

pub mod external;
pub mod head;
mod mel;

use std::collections::BTreeMap;
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::SegmentBatch;

pub use external::{ExternalBackend, DEFAULT_BATCH_DEADLINE};
pub use head::LinearHead;
pub use mel::{MelBackend, MEL_BANDS, MEL_FEATURES};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("model {0:?} is not registered")]
    UnknownModel(String),
    #[error("model {0:?} is already registered")]
    Duplicate(String),
    #[error("invalid model spec for {name:?}: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("batch does not match model {model:?}: {reason}")]
    Contract { model: String, reason: String },
    #[error("external backend {model:?} failed: {reason}")]
    External { model: String, reason: String },
    #[error("external backend {model:?} exceeded the {deadline:?} batch deadline")]
    Timeout { model: String, deadline: Duration },
    #[error("no classifier available for model {0:?}")]
    NoClassifier(String),
    #[error("classifier input width {got} does not match {expected}")]
    Width { expected: usize, got: usize },
}

/// Registry entry describing a backend's input and output contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub sample_rate: u32,
    pub window_s: f64,
    pub embedding_dim: usize,
    pub has_classifier: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_list: Option<Vec<String>>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |reason: &str| BackendError::InvalidSpec {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.name.is_empty() {
            return Err(invalid("name is empty"));
        }
        // names become directory names next to evaluations/selections
        let safe = |c: char| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.');
        if !self.name.chars().all(safe) || self.name.starts_with('.') {
            return Err(invalid("name may only use ASCII letters, digits, '-', '_' and inner '.'"));
        }
        if self.name == "selections" {
            return Err(invalid("name is reserved for exported selections"));
        }
        if self.embedding_dim == 0 {
            return Err(invalid("embedding_dim must be >= 1"));
        }
        if self.sample_rate == 0 {
            return Err(invalid("sample_rate must be > 0"));
        }
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err(invalid("window_s must be positive"));
        }
        let has_classes = self.class_list.as_ref().is_some_and(|c| !c.is_empty());
        if self.has_classifier != has_classes {
            return Err(invalid("has_classifier requires a non-empty class_list"));
        }
        Ok(())
    }

    /// Samples per input frame.
    pub fn window_samples(&self) -> usize {
        (self.window_s * f64::from(self.sample_rate)).round() as usize
    }

    pub(crate) fn check_batch(&self, batch: &SegmentBatch) -> Result<(), BackendError> {
        if batch.sample_rate != self.sample_rate {
            return Err(BackendError::Contract {
                model: self.name.clone(),
                reason: format!(
                    "sample rate {} Hz, expected {} Hz",
                    batch.sample_rate, self.sample_rate
                ),
            });
        }
        if !batch.is_empty() && batch.frame_len() != self.window_samples() {
            return Err(BackendError::Contract {
                model: self.name.clone(),
                reason: format!(
                    "frame length {}, expected {}",
                    batch.frame_len(),
                    self.window_samples()
                ),
            });
        }
        Ok(())
    }
}

/// A feature extractor bound to one [`ModelSpec`].
pub trait Embedder: Send {
    fn spec(&self) -> &ModelSpec;

    /// One row per frame of `batch`, `spec().embedding_dim` columns.
    fn embed(&mut self, batch: &SegmentBatch) -> Result<Array2<f32>, BackendError>;
}

/// How a registered model is instantiated.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    /// Built-in log-mel reference backend.
    Mel,
    /// Child process speaking the length-prefixed frame protocol.
    External {
        command: Vec<String>,
        deadline: Duration,
    },
}

#[derive(Debug, Clone)]
struct Entry {
    spec: ModelSpec,
    kind: BackendKind,
}

/// Known backends by name.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: BTreeMap<String, Entry>,
}

pub const MEL_SMALL: &str = "mel-small";
pub const MEL_LARGE: &str = "mel-large";
pub const TOY_CLASS_COUNT: usize = 10;

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry with the two reference backends.
    pub fn with_defaults() -> Self {
        let mut reg = Self::empty();
        reg.register(
            ModelSpec {
                name: MEL_SMALL.into(),
                sample_rate: 16_000,
                window_s: 1.0,
                embedding_dim: 128,
                has_classifier: false,
                class_list: None,
            },
            BackendKind::Mel,
        )
        .expect("fresh registry");
        reg.register(
            ModelSpec {
                name: MEL_LARGE.into(),
                sample_rate: 48_000,
                window_s: 3.0,
                embedding_dim: 1024,
                has_classifier: true,
                class_list: Some((0..TOY_CLASS_COUNT).map(|i| format!("toyclass{i}")).collect()),
            },
            BackendKind::Mel,
        )
        .expect("fresh registry");
        reg
    }

    pub fn register(&mut self, spec: ModelSpec, kind: BackendKind) -> Result<(), BackendError> {
        spec.validate()?;
        if self.entries.contains_key(&spec.name) {
            return Err(BackendError::Duplicate(spec.name));
        }
        self.entries
            .insert(spec.name.clone(), Entry { spec, kind });
        Ok(())
    }

    /// All registered specs, ordered by name.
    pub fn list(&self) -> Vec<ModelSpec> {
        self.entries.values().map(|e| e.spec.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ModelSpec> {
        self.entries.get(name).map(|e| &e.spec)
    }

    pub fn kind(&self, name: &str) -> Option<&BackendKind> {
        self.entries.get(name).map(|e| &e.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Instantiate a backend. External backends spawn their child here.
    pub fn open(&self, name: &str) -> Result<BackendHandle, BackendError> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| BackendError::UnknownModel(name.to_string()))?;
        let (embedder, head): (Box<dyn Embedder>, Option<LinearHead>) = match &entry.kind {
            BackendKind::Mel => {
                let backend = MelBackend::new(entry.spec.clone());
                let head = entry
                    .spec
                    .class_list
                    .as_ref()
                    .map(|classes| LinearHead::seeded_toy(&entry.spec, classes.clone()));
                (Box::new(backend), head)
            }
            BackendKind::External { command, deadline } => (
                Box::new(ExternalBackend::spawn(entry.spec.clone(), command, *deadline)?),
                None,
            ),
        };
        Ok(BackendHandle {
            spec: entry.spec.clone(),
            embedder,
            head,
            probe: None,
        })
    }
}

/// An instantiated backend with its optional classifier head.
pub struct BackendHandle {
    spec: ModelSpec,
    embedder: Box<dyn Embedder>,
    head: Option<LinearHead>,
    probe: Option<LinearHead>,
}

impl std::fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendHandle")
            .field("spec", &self.spec)
            .field("head", &self.head.is_some())
            .field("probe", &self.probe.is_some())
            .finish()
    }
}

impl BackendHandle {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn embed(&mut self, batch: &SegmentBatch) -> Result<Array2<f32>, BackendError> {
        self.spec.check_batch(batch)?;
        let out = self.embedder.embed(batch)?;
        if out.nrows() != batch.len() || out.ncols() != self.spec.embedding_dim {
            return Err(BackendError::External {
                model: self.spec.name.clone(),
                reason: format!(
                    "returned {}x{} for a batch of {} (dim {})",
                    out.nrows(),
                    out.ncols(),
                    batch.len(),
                    self.spec.embedding_dim
                ),
            });
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::External {
                model: self.spec.name.clone(),
                reason: "non-finite embedding values".into(),
            });
        }
        Ok(out)
    }

    /// Attach a trained probe head; it takes precedence over a native head.
    pub fn attach_probe(&mut self, probe: LinearHead) -> Result<(), BackendError> {
        if probe.input_dim() != self.spec.embedding_dim {
            return Err(BackendError::Width {
                expected: self.spec.embedding_dim,
                got: probe.input_dim(),
            });
        }
        self.probe = Some(probe);
        Ok(())
    }

    pub fn can_classify(&self) -> bool {
        self.probe.is_some() || self.head.is_some()
    }

    fn active_head(&self) -> Result<&LinearHead, BackendError> {
        self.probe
            .as_ref()
            .or(self.head.as_ref())
            .ok_or_else(|| BackendError::NoClassifier(self.spec.name.clone()))
    }

    pub fn class_list(&self) -> Result<&[String], BackendError> {
        Ok(self.active_head()?.classes())
    }

    /// Per-class sigmoid scores, one row per embedding.
    pub fn classify(&self, embeddings: &Array2<f32>) -> Result<Array2<f32>, BackendError> {
        self.active_head()?.scores(embeddings)
    }
}
