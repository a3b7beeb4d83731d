use std::fs::File;
use std::io::ErrorKind;
use std::path::Path;

use symphonia::core::audio::SampleBuffer;
use symphonia::core::codecs::{DecoderOptions, CODEC_TYPE_NULL};
use symphonia::core::errors::Error as SymError;
use symphonia::core::formats::{FormatOptions, FormatReader};
use symphonia::core::io::MediaSourceStream;
use symphonia::core::meta::MetadataOptions;
use symphonia::core::probe::Hint;

use super::{AudioBuffer, AudioError};

/// Container-level facts read without decoding the whole payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioInfo {
    pub sample_rate: u32,
    pub channels: usize,
    pub frames: u64,
}

impl AudioInfo {
    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / f64::from(self.sample_rate)
    }
}

fn open_format(path: &Path) -> Result<Box<dyn FormatReader>, AudioError> {
    let file = File::open(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mss = MediaSourceStream::new(Box::new(file), Default::default());
    let mut hint = Hint::new();
    if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
        hint.with_extension(&ext.to_ascii_lowercase());
    }
    let probed = symphonia::default::get_probe()
        .format(
            &hint,
            mss,
            &FormatOptions::default(),
            &MetadataOptions::default(),
        )
        .map_err(|e| AudioError::Unsupported {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(probed.format)
}

/// Read sample rate, channel count and frame count from the container header.
/// Containers without a frame count (some MP3s) are decoded to count frames.
pub fn probe(path: &Path) -> Result<AudioInfo, AudioError> {
    let format = open_format(path)?;
    let track = format
        .default_track()
        .ok_or_else(|| AudioError::Unsupported {
            path: path.to_path_buf(),
            reason: "no audio track".into(),
        })?;
    let params = &track.codec_params;
    let sample_rate = params.sample_rate.ok_or_else(|| AudioError::Unsupported {
        path: path.to_path_buf(),
        reason: "missing sample rate".into(),
    })?;
    let channels = params.channels.map(|c| c.count()).unwrap_or(1);
    let frames = match params.n_frames {
        Some(n) => n,
        None => decode(path)?.len() as u64,
    };
    Ok(AudioInfo {
        sample_rate,
        channels,
        frames,
    })
}

/// Decode a file to a mono buffer at its native rate; channels are averaged.
pub fn decode(path: &Path) -> Result<AudioBuffer, AudioError> {
    let mut format = open_format(path)?;
    let track = format
        .tracks()
        .iter()
        .find(|t| t.codec_params.codec != CODEC_TYPE_NULL)
        .ok_or_else(|| AudioError::Unsupported {
            path: path.to_path_buf(),
            reason: "no decodable track".into(),
        })?;
    let track_id = track.id;
    let expected_frames = track.codec_params.n_frames;
    let sample_rate = track
        .codec_params
        .sample_rate
        .ok_or_else(|| AudioError::Unsupported {
            path: path.to_path_buf(),
            reason: "missing sample rate".into(),
        })?;
    let mut decoder = symphonia::default::get_codecs()
        .make(&track.codec_params, &DecoderOptions::default())
        .map_err(|e| AudioError::Unsupported {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;

    let mut mono: Vec<f32> = Vec::new();
    let mut sample_buf: Option<SampleBuffer<f32>> = None;
    loop {
        let packet = match format.next_packet() {
            Ok(p) => p,
            Err(SymError::IoError(e)) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(SymError::ResetRequired) => break,
            Err(e) => {
                return Err(AudioError::Decode {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            }
        };
        if packet.track_id() != track_id {
            continue;
        }
        let decoded = match decoder.decode(&packet) {
            Ok(d) => d,
            Err(SymError::DecodeError(_)) => continue,
            Err(e) => {
                return Err(AudioError::Decode {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            }
        };
        let spec = *decoded.spec();
        let channels = spec.channels.count().max(1);
        let buf = sample_buf.get_or_insert_with(|| {
            SampleBuffer::<f32>::new(decoded.capacity() as u64, spec)
        });
        if buf.capacity() < decoded.capacity() * channels {
            *buf = SampleBuffer::<f32>::new(decoded.capacity() as u64, spec);
        }
        buf.copy_interleaved_ref(decoded);
        let inv = 1.0 / channels as f32;
        mono.extend(
            buf.samples()
                .chunks_exact(channels)
                .map(|frame| frame.iter().sum::<f32>() * inv),
        );
    }

    if mono.is_empty() {
        return Err(AudioError::Empty {
            path: path.to_path_buf(),
        });
    }
    if let Some(expected) = expected_frames {
        if (mono.len() as u64) < expected {
            return Err(AudioError::Truncated {
                path: path.to_path_buf(),
                expected,
                decoded: mono.len() as u64,
            });
        }
        mono.truncate(expected as usize);
    }
    AudioBuffer::new(mono, sample_rate)
}

/// Encode a buffer as a mono 32-bit float WAV.
pub fn write_wav_f32(buf: &AudioBuffer) -> Result<Vec<u8>, AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec)?;
        for &s in buf.samples() {
            writer.write_sample(s)?;
        }
        writer.finalize()?;
    }
    Ok(cursor.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pcm16(path: &Path, channels: u16, frames: &[Vec<i16>]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for frame in frames {
            for &s in frame {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn stereo_antiphase_downmixes_to_silence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let frames: Vec<Vec<i16>> = (0..400)
            .map(|i| {
                let v = ((i as f32 * 0.1).sin() * 20000.0) as i16;
                vec![v, -v]
            })
            .collect();
        write_pcm16(&path, 2, &frames);
        let buf = decode(&path).unwrap();
        assert_eq!(buf.len(), 400);
        assert!(buf.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_full_scale_square_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sq.wav");
        let frames: Vec<Vec<i16>> = (0..200)
            .map(|i| vec![if (i / 10) % 2 == 0 { 32767 } else { -32767 }])
            .collect();
        write_pcm16(&path, 1, &frames);
        let buf = decode(&path).unwrap();
        let expected = 32767.0f32 / 32768.0;
        assert!(buf.samples().iter().all(|&s| s.abs() == expected));
        assert_eq!(buf.samples()[0], expected);
        assert_eq!(buf.samples()[10], -expected);
    }

    #[test]
    fn empty_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        write_pcm16(&path, 1, &[]);
        assert!(matches!(decode(&path), Err(AudioError::Empty { .. })));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let frames: Vec<Vec<i16>> = (0..1000).map(|i| vec![i as i16]).collect();
        write_pcm16(&path, 1, &frames);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 600]).unwrap();
        assert!(matches!(
            decode(&path),
            Err(AudioError::Truncated { .. }) | Err(AudioError::Decode { .. })
        ));
    }

    #[test]
    fn garbage_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.wav");
        std::fs::write(&path, b"not really a wav file at all").unwrap();
        assert!(decode(&path).is_err());
        assert!(probe(&path).is_err());
    }

    #[test]
    fn float_wav_round_trip() {
        let buf = AudioBuffer::new(vec![0.25, -0.5, 0.125, 1.0], 48_000).unwrap();
        let bytes = write_wav_f32(&buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        std::fs::write(&path, bytes).unwrap();
        let back = decode(&path).unwrap();
        assert_eq!(back, buf);
        let info = probe(&path).unwrap();
        assert_eq!(info.frames, 4);
        assert_eq!(info.sample_rate, 48_000);
    }
}
