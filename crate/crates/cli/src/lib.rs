//! Pipeline stages and the synthetic dataset generator behind the
//! `sonoscope` binary.

pub mod pipeline;
pub mod synth;

pub use pipeline::{Context, EmbedReport, PipelineError, RunSummary, StepReport, StepStatus};
