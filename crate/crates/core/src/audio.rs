//! WAV file I/O: mono 16-bit PCM and 32-bit float.

use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::Waveform;

fn wav_err(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Read a mono WAV file. Multichannel files and sample formats other than
/// 16-bit PCM / 32-bit float are rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            format!("expected mono audio, file has {} channels", spec.channels),
        ));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (format, bits) => {
            return Err(wav_err(
                path,
                format!("unsupported sample format {format:?}/{bits}-bit (expected 16-bit PCM or 32-bit float)"),
            ))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Write a mono 32-bit float WAV file.
pub fn write_wav_f32(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in wave.samples() {
        writer.write_sample(s as f32).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

/// Write a mono 16-bit PCM WAV file (values clipped to [-1, 1]).
pub fn write_wav_pcm16(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in wave.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..100).map(|i| ((i as f64) * 0.1).sin() * 0.5).collect();
        let wave = Waveform::new(samples.clone(), 16000).unwrap();
        write_wav_f32(&path, &wave).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16000);
        for (a, b) in back.samples().iter().zip(&samples) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn pcm16_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let samples: Vec<f64> = (0..100).map(|i| ((i as f64) * 0.3).cos() * 0.9).collect();
        write_wav_pcm16(&path, &Waveform::new(samples.clone(), 48000).unwrap()).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 48000);
        for (a, b) in back.samples().iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn stereo_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(0i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        match read_wav(&path) {
            Err(Error::Wav { detail, .. }) => assert!(detail.contains("mono")),
            other => panic!("expected channel error, got {other:?}"),
        }
    }
}
