use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use super::{AudioBuffer, AudioError};

pub const DEFAULT_FFT_SIZE: usize = 1024;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_FLOOR_DB: f64 = -80.0;

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time spectra over `samples`, one `Vec` of `fft_size / 2 + 1`
/// magnitudes-squared per frame. Inputs shorter than `fft_size` are
/// zero-padded to a single frame.
pub fn power_frames(
    samples: &[f32],
    fft: &Arc<dyn Fft<f64>>,
    hop: usize,
    window: &[f64],
) -> Vec<Vec<f64>> {
    let n_fft = window.len();
    let n_frames = if samples.len() <= n_fft {
        1
    } else {
        1 + (samples.len() - n_fft) / hop
    };
    let n_bins = n_fft / 2 + 1;
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    (0..n_frames)
        .map(|f| {
            let start = f * hop;
            for (i, c) in buf.iter_mut().enumerate() {
                let s = samples.get(start + i).copied().unwrap_or(0.0);
                *c = Complex::new(f64::from(s) * window[i], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            buf[..n_bins].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Magnitude spectrogram in dB relative to its maximum, clipped to
/// `[floor_db, 0]`. Rows are frequency bins, columns time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramImage {
    pub matrix: Array2<f32>,
    pub freq_axis: Vec<f64>,
    pub time_axis: Vec<f64>,
    pub floor_db: f64,
}

impl SpectrogramImage {
    pub fn n_bins(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.matrix.ncols()
    }

    /// Bin with the largest value summed over time.
    pub fn peak_bin(&self) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, row) in self.matrix.rows().into_iter().enumerate() {
            let total: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if total > best.1 {
                best = (i, total);
            }
        }
        best.0
    }
}

impl Serialize for SpectrogramImage {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f32>> = self.matrix.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut s = serializer.serialize_struct("SpectrogramImage", 4)?;
        s.serialize_field("matrix", &rows)?;
        s.serialize_field("freq_axis", &self.freq_axis)?;
        s.serialize_field("time_axis", &self.time_axis)?;
        s.serialize_field("floor_db", &self.floor_db)?;
        s.end()
    }
}

/// Hann-windowed STFT magnitude in dB re max.
pub fn spectrogram(
    buf: &AudioBuffer,
    fft_size: usize,
    hop: usize,
    floor_db: f64,
) -> Result<SpectrogramImage, AudioError> {
    if !fft_size.is_power_of_two() || fft_size < 2 {
        return Err(AudioError::InvalidParams(format!(
            "fft size {fft_size} is not a power of two"
        )));
    }
    if hop == 0 || hop > fft_size {
        return Err(AudioError::InvalidParams(format!(
            "hop {hop} must be in 1..={fft_size}"
        )));
    }
    if floor_db >= 0.0 {
        return Err(AudioError::InvalidParams("floor must be negative dB".into()));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let window = hann_window(fft_size);
    let frames = power_frames(buf.samples(), &fft, hop, &window);
    let n_bins = fft_size / 2 + 1;
    let max_power = frames
        .iter()
        .flat_map(|f| f.iter())
        .fold(0.0f64, |m, &p| m.max(p));

    let mut matrix = Array2::<f32>::from_elem((n_bins, frames.len()), floor_db as f32);
    if max_power > 0.0 {
        for (t, frame) in frames.iter().enumerate() {
            for (k, &p) in frame.iter().enumerate() {
                let db = if p > 0.0 {
                    10.0 * (p / max_power).log10()
                } else {
                    floor_db
                };
                matrix[[k, t]] = db.clamp(floor_db, 0.0) as f32;
            }
        }
    }
    let sr = f64::from(buf.sample_rate());
    Ok(SpectrogramImage {
        matrix,
        freq_axis: (0..n_bins).map(|k| k as f64 * sr / fft_size as f64).collect(),
        time_axis: (0..frames.len()).map(|t| (t * hop) as f64 / sr).collect(),
        floor_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tone(freq: f64, rate: u32, n: usize) -> AudioBuffer {
        AudioBuffer::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
                .collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn tone_peak_bin_matches_frequency() {
        // bin = f * N / sr = 1000 * 1024 / 16000
        let spec = spectrogram(&tone(1000.0, 16_000, 16_000), 1024, 256, -80.0).unwrap();
        assert_eq!(spec.peak_bin(), 64);
        for t in 0..spec.n_frames() {
            let col = spec.matrix.column(t);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 64);
        }
    }

    #[test]
    fn silence_sits_at_floor() {
        let buf = AudioBuffer::new(vec![0.0; 5000], 16_000).unwrap();
        let spec = spectrogram(&buf, 1024, 256, -80.0).unwrap();
        assert!(spec.matrix.iter().all(|&v| v == -80.0));
    }

    #[test]
    fn frame_count_arithmetic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let noise: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let buf = AudioBuffer::new(noise, 16_000).unwrap();
        let spec = spectrogram(&buf, 1024, 256, -80.0).unwrap();
        assert_eq!(spec.n_frames(), 1 + (n - 1024) / 256);
        assert_eq!(spec.n_bins(), 513);
        assert!(spec.matrix.iter().all(|&v| (-80.0..=0.0).contains(&v)));
        assert!(spec.freq_axis.windows(2).all(|w| w[1] > w[0]));
        assert!(spec.time_axis.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn short_buffer_gives_one_frame() {
        let spec = spectrogram(&tone(500.0, 8000, 300), 1024, 256, -60.0).unwrap();
        assert_eq!(spec.n_frames(), 1);
    }

    #[test]
    fn rejects_bad_parameters() {
        let buf = tone(500.0, 8000, 3000);
        assert!(spectrogram(&buf, 1000, 256, -80.0).is_err());
        assert!(spectrogram(&buf, 1024, 2048, -80.0).is_err());
    }
}
