//! Synthetic labelled recordings for smoke tests and demos.
//!
//! Class `c` is a tone burst at `500 * (c + 1)` Hz over a pink-noise floor.
//! Bursts last three seconds, start on whole seconds and never overlap, so
//! every annotation maps to segments of a single class.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SAMPLE_RATE: u32 = 48_000;
pub const BURST_S: f64 = 3.0;
/// Each burst sits inside its own slot with at least a second of silence
/// before the next one.
const SLOT_S: f64 = 6.0;
const MAX_OFFSET_S: u32 = 2;
const RAMP_S: f64 = 0.02;
const NOISE_RMS: f64 = 0.01;
pub const CLASS_SET: &str = "species";
/// Carriers must stay below the Nyquist rate of the 16 kHz backend.
pub const MAX_CLASSES: usize = 15;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth parameters: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Wav { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub files: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub bursts_per_class: usize,
    pub sites: usize,
    pub dates: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            files: 12,
            duration_s: 60.0,
            seed: 7,
            bursts_per_class: 2,
            sites: 2,
            dates: 2,
        }
    }
}

/// One written annotation row.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthEvent {
    pub file: String,
    pub start: f64,
    pub end: f64,
    pub class: String,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub audio_dir: PathBuf,
    pub annotations: PathBuf,
    pub files: Vec<String>,
    pub events: Vec<SynthEvent>,
}

pub fn class_name(c: usize) -> String {
    format!("toyclass{c}")
}

pub fn carrier_hz(c: usize) -> f64 {
    500.0 * (c + 1) as f64
}

pub fn site_name(s: usize) -> String {
    let letter = (b'A' + (s % 26) as u8) as char;
    if s < 26 {
        format!("site{letter}")
    } else {
        format!("site{letter}{}", s / 26)
    }
}

impl SynthSpec {
    fn slots(&self) -> usize {
        (self.duration_s / SLOT_S).floor() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return bad(format!("classes must be in 1..={MAX_CLASSES}"));
        }
        if self.files == 0 || self.sites == 0 || self.dates == 0 {
            return bad("files, sites and dates must be positive".into());
        }
        if self.dates > self.files {
            return bad(format!("{} dates need at least as many files", self.dates));
        }
        let needed = self.classes * self.bursts_per_class;
        if needed > self.slots() {
            return bad(format!(
                "{needed} bursts need {} s per file, got {} s",
                needed as f64 * SLOT_S,
                self.duration_s
            ));
        }
        Ok(())
    }

    /// Relative path of file `i`: `<site>/<YYYYmmdd_HHMMSS>.wav`.
    pub fn file_name(&self, i: usize) -> String {
        let per_date = self.files.div_ceil(self.dates);
        let date_idx = i / per_date;
        let k = (i % per_date) as i64;
        let base: NaiveDateTime = NaiveDate::from_ymd_opt(2024, 5, 1)
            .and_then(|d| d.and_hms_opt(5, 0, 0))
            .expect("valid base date");
        let t = base + Duration::days(date_idx as i64) + Duration::minutes(70 * k);
        format!("{}/{}.wav", site_name(i % self.sites), t.format("%Y%m%d_%H%M%S"))
    }
}

fn file_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Paul Kellett's pink filter over unit white noise.
struct Pink {
    b: [f64; 7],
}

impl Pink {
    fn next(&mut self, w: f64) -> f64 {
        let b = &mut self.b;
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        let out = b.iter().sum::<f64>() + w * 0.5362;
        b[6] = w * 0.115926;
        out * 0.11
    }
}

/// Render file `i`: samples and the bursts placed in it.
pub fn render(spec: &SynthSpec, i: usize) -> (Vec<f64>, Vec<SynthEvent>) {
    let mut rng = file_rng(spec.seed, i);
    let rate = f64::from(SAMPLE_RATE);
    let n = (spec.duration_s * rate).round() as usize;
    let mut pink = Pink { b: [0.0; 7] };
    let mut x: Vec<f64> = (0..n)
        .map(|_| pink.next(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= NOISE_RMS / rms);
    }

    let mut slots: Vec<usize> = (0..spec.slots()).collect();
    slots.shuffle(&mut rng);
    let file = spec.file_name(i);
    let mut events = Vec::new();
    for (b, &slot) in slots
        .iter()
        .take(spec.classes * spec.bursts_per_class)
        .enumerate()
    {
        let class = b / spec.bursts_per_class;
        let offset = rng.random_range(0..=MAX_OFFSET_S);
        let start = slot as f64 * SLOT_S + f64::from(offset);
        let amp = rng.random_range(0.2..0.3);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let w = std::f64::consts::TAU * carrier_hz(class) / rate;
        let s0 = (start * rate).round() as usize;
        let len = (BURST_S * rate).round() as usize;
        let ramp = (RAMP_S * rate) as usize;
        for j in 0..len.min(n.saturating_sub(s0)) {
            let edge = j.min(len - 1 - j);
            let env = if edge < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            x[s0 + j] += amp * env * (w * j as f64 + phase).sin();
        }
        events.push(SynthEvent {
            file: file.clone(),
            start,
            end: start + BURST_S,
            class: class_name(class),
        });
    }
    events.sort_by(|a, b| a.start.total_cmp(&b.start));
    (x, events)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_pcm16(path: &Path, samples: &[f64]) -> Result<(), SynthError> {
    let wav_err = |e: hound::Error| SynthError::Wav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in samples {
        let q = (v * f64::from(i16::MAX)).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX));
        w.write_sample(q as i16).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Annotation CSV text for `events`.
pub fn annotations_csv(events: &[SynthEvent]) -> String {
    let mut out = format!("audiofilename,start,end,label:{CLASS_SET}\n");
    for e in events {
        out.push_str(&format!("{},{:.3},{:.3},{}\n", e.file, e.start, e.end, e.class));
    }
    out
}

/// Write the recordings under `audio_dir` and the annotation table at
/// `annotations`. Output bytes depend only on `spec`.
pub fn generate(spec: &SynthSpec, audio_dir: &Path, annotations: &Path) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let mut files = Vec::with_capacity(spec.files);
    let mut events = Vec::new();
    for i in 0..spec.files {
        let rel = spec.file_name(i);
        let path = audio_dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let (samples, evs) = render(spec, i);
        write_pcm16(&path, &samples)?;
        files.push(rel);
        events.extend(evs);
    }
    if let Some(parent) = annotations.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(annotations, annotations_csv(&events)).map_err(io_err(annotations))?;
    Ok(SynthOutput {
        audio_dir: audio_dir.to_path_buf(),
        annotations: annotations.to_path_buf(),
        files,
        events,
    })
}
