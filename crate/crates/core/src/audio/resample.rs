//! Rational-ratio polyphase resampler with a Kaiser-windowed sinc kernel.

use rayon::prelude::*;

use super::AudioBuffer;

/// Input samples contributing to each output sample.
const TAPS: usize = 64;
const HALF: f64 = (TAPS / 2) as f64;
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the lower of the two Nyquist rates.
const CUTOFF: f64 = 0.95;
/// Above this many phases the kernel is evaluated per output sample.
const MAX_TABLE_PHASES: u64 = 8192;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= (half / k) * (half / k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

struct Kernel {
    bandwidth: f64,
    i0_beta: f64,
}

impl Kernel {
    fn new(source: u32, target: u32) -> Self {
        let lower = source.min(target) as f64;
        Self {
            bandwidth: CUTOFF * lower / source as f64,
            i0_beta: bessel_i0(KAISER_BETA),
        }
    }

    /// Kernel value at offset `tau` input samples from the output instant.
    fn eval(&self, tau: f64) -> f64 {
        let x = tau / HALF;
        if x.abs() >= 1.0 {
            return 0.0;
        }
        let w = bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / self.i0_beta;
        self.bandwidth * sinc(self.bandwidth * tau) * w
    }

    /// Unit-DC-gain taps for fractional position `frac` in [0, 1).
    fn phase_row(&self, frac: f64) -> [f64; TAPS] {
        let mut row = [0.0; TAPS];
        for (k, tap) in row.iter_mut().enumerate() {
            *tap = self.eval(frac + (HALF - 1.0) - k as f64);
        }
        let sum: f64 = row.iter().sum();
        if sum.abs() > 1e-12 {
            row.iter_mut().for_each(|t| *t /= sum);
        }
        row
    }
}

/// Resample to `target_rate`. Output length is `round(n * target / source)`;
/// equal rates return an identical copy.
///
/// Panics if `target_rate` is zero.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> AudioBuffer {
    assert!(target_rate > 0, "target sample rate must be positive");
    let source_rate = buf.sample_rate();
    if source_rate == target_rate {
        return buf.clone();
    }
    let g = gcd(u64::from(source_rate), u64::from(target_rate));
    let up = u64::from(target_rate) / g;
    let down = u64::from(source_rate) / g;
    let n = buf.len() as u64;
    let out_len = ((u128::from(n) * u128::from(target_rate) + u128::from(source_rate) / 2)
        / u128::from(source_rate)) as usize;

    let kernel = Kernel::new(source_rate, target_rate);
    let table: Option<Vec<[f64; TAPS]>> = (up <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| kernel.phase_row(p as f64 / up as f64))
            .collect()
    });

    let input = buf.samples();
    let mut out = vec![0.0f32; out_len];
    out.par_chunks_mut(4096)
        .enumerate()
        .for_each(|(chunk_idx, chunk)| {
            let mut scratch;
            for (i, y) in chunk.iter_mut().enumerate() {
                let m = (chunk_idx * 4096 + i) as u64;
                let pos = m * down;
                let center = (pos / up) as i64;
                let phase = pos % up;
                let row = match &table {
                    Some(t) => &t[phase as usize],
                    None => {
                        scratch = kernel.phase_row(phase as f64 / up as f64);
                        &scratch
                    }
                };
                let first = center - (TAPS as i64 / 2 - 1);
                let mut acc = 0.0f64;
                for (k, &tap) in row.iter().enumerate() {
                    let j = first + k as i64;
                    if j >= 0 && (j as usize) < input.len() {
                        acc += tap * f64::from(input[j as usize]);
                    }
                }
                *y = acc as f32;
            }
        });

    AudioBuffer::new(out, target_rate).expect("resampler output is finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, seconds: f64, amp: f64) -> AudioBuffer {
        let n = (seconds * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioBuffer::new(samples, rate).unwrap()
    }

    #[test]
    fn identity_when_rates_match() {
        let buf = sine(440.0, 16_000, 0.5, 0.3);
        let out = resample(&buf, 16_000);
        assert_eq!(out.samples(), buf.samples());
        assert_eq!(out.sample_rate(), 16_000);
    }

    #[test]
    fn output_length_rounds() {
        let buf = AudioBuffer::new(vec![0.0; 44_101], 44_100).unwrap();
        assert_eq!(resample(&buf, 16_000).len(), 16_000);
        let buf = AudioBuffer::new(vec![0.0; 10], 48_000).unwrap();
        assert_eq!(resample(&buf, 16_000).len(), 3);
        let buf = AudioBuffer::new(vec![0.0; 7], 16_000).unwrap();
        assert_eq!(resample(&buf, 48_000).len(), 21);
    }

    #[test]
    fn dc_is_preserved_in_the_interior() {
        let buf = AudioBuffer::new(vec![0.5; 4800], 48_000).unwrap();
        let out = resample(&buf, 16_000);
        for &s in &out.samples()[40..out.len() - 40] {
            assert!((s - 0.5).abs() < 1e-4, "{s}");
        }
        let up = resample(&AudioBuffer::new(vec![0.5; 1600], 16_000).unwrap(), 44_100);
        for &s in &up.samples()[200..up.len() - 200] {
            assert!((s - 0.5).abs() < 1e-4, "{s}");
        }
    }

    #[test]
    fn linear_in_amplitude() {
        let buf = sine(1234.0, 44_100, 0.2, 0.4);
        let scaled = AudioBuffer::new(buf.samples().iter().map(|s| s * 2.5).collect(), 44_100).unwrap();
        let a = resample(&buf, 16_000);
        let b = resample(&scaled, 16_000);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert!((x * 2.5 - y).abs() < 1e-6);
        }
    }

    #[test]
    fn bessel_reference() {
        // I0(1) and I0(8.6) to double precision
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-14);
        assert!((bessel_i0(8.6) - 750.461_159_563_165_9).abs() / 750.46 < 1e-9);
    }
}
