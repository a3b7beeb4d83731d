//! Audio handling: decoding, resampling, segmentation and spectrograms.

mod decode;
mod resample;
mod segment;
mod spectrogram;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use decode::{decode, probe, write_wav_f32, AudioInfo};
pub use resample::resample;
pub use segment::{segment, SegmentBatch, Segmenter, MIN_WINDOW_FRACTION};
pub use spectrogram::{
    hann_window, power_frames, spectrogram, SpectrogramImage, DEFAULT_FFT_SIZE, DEFAULT_FLOOR_DB,
    DEFAULT_HOP,
};

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("failed to open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported audio in {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },
    #[error("decode error in {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("{path} is truncated: expected {expected} frames, decoded {decoded}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        decoded: u64,
    },
    #[error("{path} contains no audio samples")]
    Empty { path: PathBuf },
    #[error("invalid audio buffer: {0}")]
    InvalidBuffer(String),
    #[error("invalid spectrogram parameters: {0}")]
    InvalidParams(String),
    #[error("failed to write wav: {0}")]
    Write(#[from] hound::Error),
}

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidBuffer("sample rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidBuffer(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Samples in `[start_s, end_s)`. Positions past the end are zero-filled
    /// so padded segment regions can be rendered.
    pub fn slice_padded(&self, start_s: f64, end_s: f64) -> AudioBuffer {
        let sr = f64::from(self.sample_rate);
        let start = (start_s.max(0.0) * sr).round() as usize;
        let end = (end_s.max(0.0) * sr).round() as usize;
        let mut out = vec![0.0f32; end.saturating_sub(start)];
        if start < self.samples.len() {
            let avail = (self.samples.len() - start).min(out.len());
            out[..avail].copy_from_slice(&self.samples[start..start + avail]);
        }
        AudioBuffer {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }
}

/// Segment start/end in seconds relative to the start of its file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct TimeSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeSpan {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s }
    }

    pub fn len(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn is_empty(&self) -> bool {
        self.end_s <= self.start_s
    }

    pub fn overlap(&self, other: &TimeSpan) -> f64 {
        (self.end_s.min(other.end_s) - self.start_s.max(other.start_s)).max(0.0)
    }
}

impl From<(f64, f64)> for TimeSpan {
    fn from((start_s, end_s): (f64, f64)) -> Self {
        Self { start_s, end_s }
    }
}

impl From<TimeSpan> for (f64, f64) {
    fn from(t: TimeSpan) -> Self {
        (t.start_s, t.end_s)
    }
}
