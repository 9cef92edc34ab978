//! Rational-ratio resampling with a polyphase windowed-sinc filter.
//!
//! The filter is a Blackman-windowed sinc lowpass at the tighter of the two
//! Nyquist frequencies, evaluated in polyphase form so only one phase of the
//! upsampled grid is ever computed. Each phase is normalized to unit DC gain,
//! so constants pass through exactly. Matching input and output rates is a
//! bit-exact pass-through.

use crate::error::{Error, Result};
use crate::spectral::Waveform;

/// Half-width of the sinc kernel in input samples.
const KERNEL_HALF_WIDTH: usize = 32;

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn blackman(i: f64, n: f64) -> f64 {
    let x = std::f64::consts::TAU * i / n;
    0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resample `samples` from `from` Hz to `to` Hz.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == 0 || to == 0 {
        return Err(Error::InvalidInput("sample rates must be > 0".into()));
    }
    if from == to {
        return Ok(samples.to_vec());
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let g = gcd(from, to);
    let up = (to / g) as usize; // L
    let down = (from / g) as usize; // M

    // Prototype lowpass on the upsampled grid: cutoff pi/max(L, M).
    let cutoff = 0.5 / up.max(down) as f64;
    let taps_per_phase = 2 * KERNEL_HALF_WIDTH * down.max(up) / down.max(1) + 1;
    let n_taps = taps_per_phase * up;
    let center = (n_taps - 1) as f64 / 2.0;
    let mut proto: Vec<f64> = (0..n_taps)
        .map(|i| {
            let x = i as f64 - center;
            2.0 * cutoff * sinc(2.0 * cutoff * x) * blackman(i as f64, (n_taps - 1) as f64)
        })
        .collect();

    // Per-phase unit DC gain.
    for phase in 0..up {
        let s: f64 = proto.iter().skip(phase).step_by(up).sum();
        if s.abs() > 1e-12 {
            for tap in proto.iter_mut().skip(phase).step_by(up) {
                *tap /= s;
            }
        }
    }

    let out_len = (samples.len() * up).div_ceil(down);
    let mut out = Vec::with_capacity(out_len);
    let half_phase = (taps_per_phase / 2) as isize;
    for j in 0..out_len {
        let u = j * down; // position on the upsampled grid
        let phase = u % up;
        let base = (u / up) as isize;
        let mut acc = 0.0;
        for (m, &h) in proto.iter().skip(phase).step_by(up).enumerate() {
            let idx = base - (m as isize - half_phase);
            if idx >= 0 && (idx as usize) < samples.len() {
                acc += h * samples[idx as usize];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Resample a [`Waveform`] to `target_rate`.
pub fn resample_waveform(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if wave.sample_rate() == target_rate {
        return Ok(wave.clone());
    }
    let samples = resample(wave.samples(), wave.sample_rate(), target_rate)?;
    Waveform::new(samples, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rustfft::FftPlanner;

    fn dominant_frequency(samples: &[f64], rate: f64) -> f64 {
        let n = samples.len();
        let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let argmax = buf[..n / 2]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
            .unwrap()
            .0;
        argmax as f64 * rate / n as f64
    }

    #[test]
    fn passthrough_is_bit_exact() {
        let samples: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.01).sin()).collect();
        let out = resample(&samples, 16000, 16000).unwrap();
        assert_eq!(out, samples);
    }

    #[test]
    fn downsample_3x_length() {
        let samples = vec![0.25; 48000];
        let out = resample(&samples, 48000, 16000).unwrap();
        assert_eq!(out.len(), 16000);
        // constants pass through exactly away from the edges
        for &v in &out[100..15900] {
            assert!((v - 0.25).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn tone_survives_downsampling() {
        let tone: Vec<f64> = (0..48000)
            .map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / 48000.0).sin())
            .collect();
        let out = resample(&tone, 48000, 16000).unwrap();
        let f = dominant_frequency(&out[500..15500], 16000.0);
        assert!((f - 1000.0).abs() < 16000.0 / 15000.0, "peak at {f} Hz");
        // amplitude preserved in the passband
        let peak = out[500..15500].iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!((peak - 1.0).abs() < 0.01, "peak {peak}");
    }

    #[test]
    fn upsample_non_integer_ratio() {
        let tone: Vec<f64> = (0..22050)
            .map(|i| (std::f64::consts::TAU * 440.0 * i as f64 / 22050.0).sin())
            .collect();
        let out = resample(&tone, 22050, 16000).unwrap();
        assert_eq!(out.len(), 16000);
        let f = dominant_frequency(&out[500..15500], 16000.0);
        assert!((f - 440.0).abs() < 2.0, "peak at {f} Hz");
    }
}
