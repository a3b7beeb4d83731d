//! Deterministic log-mel reference backend.
//!
//! Each frame is summarised by the mean and standard deviation over time of
//! its 64-band log-mel spectrogram. The 128 statistics are projected by a
//! Gaussian matrix seeded from the model name and L2-normalised.

use std::sync::Arc;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};

use super::{BackendError, Embedder, ModelSpec};
use crate::audio::{hann_window, power_frames, SegmentBatch};
use crate::util::{fnv1a, seeded_rng};

pub const MEL_BANDS: usize = 64;
pub const MEL_FEATURES: usize = 2 * MEL_BANDS;
const FFT_SIZE: usize = 1024;
const HOP: usize = 256;
const FMIN_HZ: f64 = 50.0;
const LOG_FLOOR_DB: f64 = -80.0;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, `MEL_BANDS` rows over `FFT_SIZE / 2 + 1` bins.
fn mel_filterbank(sample_rate: u32) -> Vec<Vec<f64>> {
    let sr = f64::from(sample_rate);
    let n_bins = FFT_SIZE / 2 + 1;
    let lo = hz_to_mel(FMIN_HZ);
    let hi = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_BANDS + 1) as f64))
        .collect();
    (0..MEL_BANDS)
        .map(|b| {
            let (left, center, right) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sr / FFT_SIZE as f64;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

pub struct MelBackend {
    spec: ModelSpec,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    power_scale: f64,
    filterbank: Vec<Vec<f64>>,
    projection: Array2<f64>,
}

impl MelBackend {
    pub fn new(spec: ModelSpec) -> Self {
        let window = hann_window(FFT_SIZE);
        // full-scale sine of amplitude A -> power A^2 in its bin
        let gain: f64 = window.iter().sum::<f64>() / 2.0;
        let mut rng = seeded_rng(fnv1a(spec.name.as_bytes()));
        let projection = Array2::from_shape_fn((MEL_FEATURES, spec.embedding_dim), |_| {
            StandardNormal.sample(&mut rng)
        });
        Self {
            fft: FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE),
            filterbank: mel_filterbank(spec.sample_rate),
            power_scale: 1.0 / (gain * gain),
            window,
            projection,
            spec,
        }
    }

    /// Per-band mean and standard deviation of the log-mel spectrogram.
    pub fn features(&self, frame: &[f32]) -> [f64; MEL_FEATURES] {
        let spectra = power_frames(frame, &self.fft, HOP, &self.window);
        let n = spectra.len() as f64;
        let mut sum = [0.0f64; MEL_BANDS];
        let mut sum_sq = [0.0f64; MEL_BANDS];
        for power in &spectra {
            for (b, filter) in self.filterbank.iter().enumerate() {
                let e: f64 = filter
                    .iter()
                    .zip(power)
                    .map(|(w, p)| w * p)
                    .sum::<f64>()
                    * self.power_scale;
                let db = if e > 0.0 {
                    (10.0 * e.log10()).max(LOG_FLOOR_DB)
                } else {
                    LOG_FLOOR_DB
                };
                sum[b] += db;
                sum_sq[b] += db * db;
            }
        }
        let mut out = [0.0f64; MEL_FEATURES];
        for b in 0..MEL_BANDS {
            let mean = sum[b] / n;
            let var = (sum_sq[b] / n - mean * mean).max(0.0);
            out[b] = mean;
            out[MEL_BANDS + b] = var.sqrt();
        }
        out
    }

    fn embed_frame(&self, frame: &[f32]) -> Vec<f32> {
        let feats = self.features(frame);
        let mut v = vec![0.0f64; self.spec.embedding_dim];
        for (i, &f) in feats.iter().enumerate() {
            let row = self.projection.row(i);
            for (acc, &w) in v.iter_mut().zip(row.iter()) {
                *acc += f * w;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v.into_iter().map(|x| x as f32).collect()
    }
}

impl Embedder for MelBackend {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn embed(&mut self, batch: &SegmentBatch) -> Result<Array2<f32>, BackendError> {
        self.spec.check_batch(batch)?;
        let dim = self.spec.embedding_dim;
        let mut out = Array2::<f32>::zeros((batch.len(), dim));
        for (i, frame) in batch.frames.rows().into_iter().enumerate() {
            let owned;
            let slice = match frame.as_slice() {
                Some(s) => s,
                None => {
                    owned = frame.to_vec();
                    &owned
                }
            };
            let row = self.embed_frame(slice);
            out.row_mut(i)
                .iter_mut()
                .zip(row)
                .for_each(|(o, v)| *o = v);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::TimeSpan;
    use crate::backends::{Registry, MEL_LARGE, MEL_SMALL};

    fn tone_frame(freq: f64, phase: f64, rate: u32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| {
                (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64 + phase).sin())
                    as f32
            })
            .collect()
    }

    fn batch(frames: Vec<Vec<f32>>, rate: u32) -> SegmentBatch {
        let n = frames.len();
        let len = frames[0].len();
        SegmentBatch {
            frames: Array2::from_shape_vec((n, len), frames.concat()).unwrap(),
            timestamps: (0..n).map(|i| TimeSpan::new(i as f64, i as f64 + 1.0)).collect(),
            source: "t".into(),
            sample_rate: rate,
        }
    }

    fn cosine(a: ndarray::ArrayView1<f32>, b: ndarray::ArrayView1<f32>) -> f64 {
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn silence_vector_is_fixed() {
        let reg = Registry::with_defaults();
        let mut a = reg.open(MEL_SMALL).unwrap();
        let mut b = reg.open(MEL_SMALL).unwrap();
        let zeros = batch(vec![vec![0.0; 16_000]], 16_000);
        let ea = a.embed(&zeros).unwrap();
        let eb = b.embed(&zeros).unwrap();
        assert_eq!(ea, eb);
        assert_eq!(ea, a.embed(&zeros).unwrap());
        let norm: f32 = ea.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn identical_frames_give_identical_rows() {
        let reg = Registry::with_defaults();
        let mut h = reg.open(MEL_SMALL).unwrap();
        let f = tone_frame(700.0, 0.3, 16_000, 16_000);
        let e = h.embed(&batch(vec![f.clone(), f], 16_000)).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn distant_tones_are_farther_than_phase_shifts() {
        let reg = Registry::with_defaults();
        let mut h = reg.open(MEL_SMALL).unwrap();
        let frames = vec![
            tone_frame(440.0, 0.0, 16_000, 16_000),
            tone_frame(440.0, 1.3, 16_000, 16_000),
            tone_frame(4400.0, 0.0, 16_000, 16_000),
        ];
        let e = h.embed(&batch(frames, 16_000)).unwrap();
        let same = cosine(e.row(0), e.row(1));
        let diff = cosine(e.row(0), e.row(2));
        assert!(diff < same, "diff {diff} same {same}");
    }

    #[test]
    fn projections_differ_between_models() {
        let reg = Registry::with_defaults();
        let small = MelBackend::new(reg.get(MEL_SMALL).unwrap().clone());
        let large = MelBackend::new(reg.get(MEL_LARGE).unwrap().clone());
        assert_eq!(large.projection.dim(), (128, 1024));
        assert_ne!(small.projection[[0, 0]], large.projection[[0, 0]]);
    }

    #[test]
    fn filterbank_covers_band() {
        let fb = mel_filterbank(16_000);
        assert_eq!(fb.len(), MEL_BANDS);
        assert!(fb.iter().all(|f| f.iter().any(|&w| w > 0.0)));
    }
}
