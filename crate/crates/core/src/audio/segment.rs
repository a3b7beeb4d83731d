use ndarray::Array2;
use tracing::warn;

use super::{AudioBuffer, TimeSpan};

/// Buffers shorter than this fraction of a window yield no segments.
pub const MIN_WINDOW_FRACTION: f64 = 0.05;

/// Fixed-length frames cut from one file, row `i` spanning `timestamps[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    pub frames: Array2<f32>,
    pub timestamps: Vec<TimeSpan>,
    pub source: String,
    pub sample_rate: u32,
}

impl SegmentBatch {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.frames.ncols()
    }
}

/// Non-overlapping windows over a buffer, starting at t = 0. The final partial
/// window is zero-padded to full length.
#[derive(Debug, Clone)]
pub struct Segmenter<'a> {
    buf: &'a AudioBuffer,
    window_s: f64,
    window_len: usize,
    count: usize,
    source: String,
}

/// Split `buf` into `window_s`-second windows.
///
/// Panics if `window_s` is not positive.
pub fn segment(buf: &AudioBuffer, window_s: f64) -> Segmenter<'_> {
    assert!(window_s > 0.0, "window length must be positive");
    let window_len = (window_s * f64::from(buf.sample_rate())).round().max(1.0) as usize;
    let n = buf.len();
    let count = if (n as f64) < MIN_WINDOW_FRACTION * window_len as f64 {
        if n > 0 {
            warn!(
                samples = n,
                window_len, "audio shorter than the minimum segment length; dropped"
            );
        }
        0
    } else {
        n.div_ceil(window_len)
    };
    Segmenter {
        buf,
        window_s,
        window_len,
        count,
        source: String::new(),
    }
}

impl<'a> Segmenter<'a> {
    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn timestamps(&self) -> Vec<TimeSpan> {
        (0..self.count).map(|i| self.span(i)).collect()
    }

    fn span(&self, i: usize) -> TimeSpan {
        let start = i as f64 * self.window_s;
        TimeSpan::new(start, start + self.window_s)
    }

    fn frames(&self, range: std::ops::Range<usize>) -> Array2<f32> {
        let samples = self.buf.samples();
        let mut frames = Array2::<f32>::zeros((range.len(), self.window_len));
        for (row, seg) in range.enumerate() {
            let start = seg * self.window_len;
            let end = (start + self.window_len).min(samples.len());
            if start < end {
                frames
                    .row_mut(row)
                    .as_slice_mut()
                    .expect("standard layout")[..end - start]
                    .copy_from_slice(&samples[start..end]);
            }
        }
        frames
    }

    /// All segments as one batch.
    pub fn all(&self) -> SegmentBatch {
        self.batch(0..self.count)
    }

    fn batch(&self, range: std::ops::Range<usize>) -> SegmentBatch {
        SegmentBatch {
            timestamps: range.clone().map(|i| self.span(i)).collect(),
            frames: self.frames(range),
            source: self.source.clone(),
            sample_rate: self.buf.sample_rate(),
        }
    }

    /// Stream of batches holding at most `batch_size` frames each.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = SegmentBatch> + '_ {
        let batch_size = batch_size.max(1);
        (0..self.count)
            .step_by(batch_size)
            .map(move |start| self.batch(start..(start + batch_size).min(self.count)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn buf(seconds: f64, rate: u32) -> AudioBuffer {
        let n = (seconds * rate as f64).round() as usize;
        AudioBuffer::new((0..n).map(|i| ((i % 97) as f32) / 97.0).collect(), rate).unwrap()
    }

    #[test]
    fn ten_seconds_at_three() {
        let b = buf(10.0, 1000);
        let seg = segment(&b, 3.0);
        let batch = seg.all();
        assert_eq!(batch.len(), 4);
        let starts: Vec<f64> = batch.timestamps.iter().map(|t| t.start_s).collect();
        assert_eq!(starts, vec![0.0, 3.0, 6.0, 9.0]);
        let last = batch.frames.row(3);
        assert!(last.iter().skip(1000).all(|&s| s == 0.0));
        assert_eq!(last.len(), 3000);
    }

    #[test]
    fn exact_multiple_has_no_padding() {
        let b = buf(3.0, 1000);
        let batch = segment(&b, 3.0).all();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch.frames.row(0).to_vec(), b.samples().to_vec());
    }

    #[test]
    fn short_buffer_is_padded() {
        let b = buf(0.2, 1000);
        let batch = segment(&b, 3.0).all();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch.frame_len(), 3000);
        assert!(batch.frames.row(0).iter().skip(200).all(|&s| s == 0.0));
    }

    #[test]
    fn tiny_buffer_is_dropped() {
        let b = buf(0.15, 1000);
        assert_eq!(segment(&b, 3.0).count(), 1);
        let b = buf(0.14, 1000);
        assert_eq!(segment(&b, 3.0).count(), 0);
    }

    #[test]
    fn batches_cover_all_segments() {
        let b = buf(10.0, 100);
        let seg = segment(&b, 1.0);
        let sizes: Vec<usize> = seg.batches(4).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    proptest! {
        #[test]
        fn concatenation_reconstructs_input(n in 0usize..5000, window in 1usize..700) {
            let rate = 100u32;
            let samples: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
            let b = AudioBuffer::new(samples.clone(), rate).unwrap();
            let window_s = window as f64 / rate as f64;
            let seg = segment(&b, window_s);
            let batch = seg.all();
            if (n as f64) >= MIN_WINDOW_FRACTION * window as f64 {
                prop_assert_eq!(batch.len(), n.div_ceil(window));
                let joined: Vec<f32> = batch.frames.iter().copied().take(n).collect();
                prop_assert_eq!(joined, samples);
                let last = batch.timestamps.last().unwrap();
                prop_assert!(last.end_s + 1e-9 >= b.duration_s());
                for w in batch.timestamps.windows(2) {
                    prop_assert!((w[1].start_s - w[0].end_s).abs() < 1e-9);
                }
            } else {
                prop_assert_eq!(batch.len(), 0);
            }
        }
    }
}
