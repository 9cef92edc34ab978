//! Compressed complex-STFT signal representation.
//!
//! Waveforms are analyzed with a periodic-Hann STFT and each coefficient is
//! amplitude-compressed, `c~ = beta * |c|^alpha * exp(i*angle(c))`. The inverse
//! path decompresses and reconstructs by least-squares overlap-add with the
//! canonical dual window, so `istft(stft(w))` recovers `w` up to rounding.
//!
//! Framing convention (the paper leaves it unspecified, so it is fixed here):
//! the signal is zero-padded to at least one FFT length, then center-padded by
//! `n_fft/2` samples of reflection on both sides. Frame `k` starts at
//! `k * hop` in the padded signal, giving `T = 1 + floor(len / hop)` frames.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate the model pipeline operates at.
pub const PIPELINE_RATE: u32 = 16_000;

/// Magnitudes below this are treated as zero when decompressing.
const DECOMPRESS_FLOOR: f64 = 1e-12;

/// Overlap-add denominators below this are treated as silence.
const OLA_FLOOR: f64 = 1e-10;

/// Analysis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    #[default]
    PeriodicHann,
}

/// STFT and amplitude-compression parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    /// FFT size in samples (must be even).
    pub n_fft: usize,
    /// Hop between frames in samples.
    pub hop: usize,
    pub window: WindowKind,
    /// Compression exponent, in (0, 1].
    pub alpha: f64,
    /// Compression scale, > 0.
    pub beta: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            n_fft: 510,
            hop: 128,
            window: WindowKind::PeriodicHann,
            alpha: 0.5,
            beta: 0.15,
        }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(Error::Config(format!(
                "n_fft must be even and >= 2, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop must satisfy 0 < hop <= n_fft, got hop={} n_fft={}",
                self.hop, self.n_fft
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1], got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Number of frequency bins, `n_fft/2 + 1` (256 for the default 510).
    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames produced for a waveform of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len.max(self.n_fft) / self.hop
    }

    /// Analysis window samples.
    pub fn window_samples(&self) -> Vec<f64> {
        match self.window {
            WindowKind::PeriodicHann => periodic_hann(self.n_fft),
        }
    }
}

/// Periodic Hann window of length `n`: `0.5 * (1 - cos(2*pi*k/n))`.
pub fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 * (1.0 - (std::f64::consts::TAU * k as f64 / n as f64).cos()))
        .collect()
}

/// A finite mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
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

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// An F x T matrix of compressed STFT coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub config: SpectralConfig,
    /// Length in samples of the waveform the spectrogram was computed from.
    pub original_length: usize,
}

impl ComplexSpectrogram {
    pub fn new(data: Array2<Complex64>, config: SpectralConfig, original_length: usize) -> Result<Self> {
        config.validate()?;
        if data.nrows() != config.freq_bins() {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram has {} rows, config implies {} bins",
                data.nrows(),
                config.freq_bins()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidInput("spectrogram contains non-finite entries".into()));
        }
        Ok(Self { data, config, original_length })
    }

    pub fn freq_bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }
}

fn check_finite(c: &Array2<Complex64>, what: &str) -> Result<()> {
    if c.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} contains non-finite entries")));
    }
    Ok(())
}

/// Amplitude-compress each coefficient: `beta * |c|^alpha * exp(i*angle(c))`.
///
/// Implemented as a real positive scaling of `c`, so the phase is preserved
/// exactly and zero maps to zero.
pub fn compress(c: &Array2<Complex64>, config: &SpectralConfig) -> Result<Array2<Complex64>> {
    config.validate()?;
    check_finite(c, "compress input")?;
    Ok(c.mapv(|z| {
        let m = z.norm();
        if m == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            z * (config.beta * m.powf(config.alpha - 1.0))
        }
    }))
}

/// Inverse of [`compress`]: `(|c|/beta)^(1/alpha) * exp(i*angle(c))`.
///
/// Magnitudes below 1e-12 are clamped to zero before exponentiation.
pub fn decompress(c: &Array2<Complex64>, config: &SpectralConfig) -> Result<Array2<Complex64>> {
    config.validate()?;
    check_finite(c, "decompress input")?;
    let inv_alpha = 1.0 / config.alpha;
    let scale = config.beta.powf(-inv_alpha);
    Ok(c.mapv(|z| {
        let m = z.norm();
        if m < DECOMPRESS_FLOOR {
            Complex64::new(0.0, 0.0)
        } else {
            z * (m.powf(inv_alpha - 1.0) * scale)
        }
    }))
}

/// Pad the waveform for framing: zero-pad to one FFT length if shorter, then
/// reflect `n_fft/2` samples on both sides (edge sample excluded, as in
/// numpy's "reflect"). After the resize, `pad <= len - 1` always holds.
fn padded_signal(samples: &[f64], n_fft: usize) -> Vec<f64> {
    let mut base = samples.to_vec();
    if base.len() < n_fft {
        base.resize(n_fft, 0.0);
    }
    let pad = n_fft / 2;
    let n = base.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        out.push(base[pad - i]);
    }
    out.extend_from_slice(&base);
    for i in 0..pad {
        out.push(base[n - 2 - i]);
    }
    out
}

/// Forward STFT with amplitude compression.
pub fn stft(w: &Waveform, config: &SpectralConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    if w.is_empty() {
        return Err(Error::InvalidInput("cannot STFT an empty waveform".into()));
    }
    if w.sample_rate() != PIPELINE_RATE {
        return Err(Error::InvalidInput(format!(
            "pipeline operates at {PIPELINE_RATE} Hz, got {} Hz (resample first)",
            w.sample_rate()
        )));
    }
    let raw = stft_raw(w.samples(), config)?;
    let compressed = compress(&raw, config)?;
    ComplexSpectrogram::new(compressed, *config, w.len())
}

/// Forward STFT without the amplitude compression (shared by [`stft`] and tests).
pub fn stft_raw(samples: &[f64], config: &SpectralConfig) -> Result<Array2<Complex64>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot STFT an empty waveform".into()));
    }
    let n_fft = config.n_fft;
    let hop = config.hop;
    let f_bins = config.freq_bins();
    let window = config.window_samples();
    let padded = padded_signal(samples, n_fft);
    let len_eff = samples.len().max(n_fft);
    let n_frames = 1 + len_eff / hop;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::zeros((f_bins, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for k in 0..n_frames {
        let start = k * hop;
        for n in 0..n_fft {
            buf[n] = Complex64::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..f_bins {
            out[(f, k)] = buf[f];
        }
    }
    Ok(out)
}

/// Least-squares synthesis denominator `D[p] = sum_k w^2[p - k*hop]` over the
/// padded support of `n_frames` frames.
pub fn ola_denominator(config: &SpectralConfig, n_frames: usize) -> Vec<f64> {
    let window = config.window_samples();
    let len = (n_frames - 1) * config.hop + config.n_fft;
    let mut d = vec![0.0; len];
    for k in 0..n_frames {
        let start = k * config.hop;
        for (n, wn) in window.iter().enumerate() {
            d[start + n] += wn * wn;
        }
    }
    d
}

/// Linear synthesis half of the inverse STFT: inverse FFT of each
/// (already-decompressed) frame, windowed overlap-add, least-squares
/// normalization, and crop back to `original_length` samples.
pub fn istft_raw(
    raw: &Array2<Complex64>,
    config: &SpectralConfig,
    original_length: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    let n_fft = config.n_fft;
    let f_bins = config.freq_bins();
    if raw.nrows() != f_bins {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} rows, config implies {} bins",
            raw.nrows(),
            f_bins
        )));
    }
    let n_frames = raw.ncols();
    if n_frames == 0 {
        return Err(Error::InvalidInput("spectrogram has no frames".into()));
    }
    let hop = config.hop;
    let window = config.window_samples();
    let denom = ola_denominator(config, n_frames);
    let padded_len = denom.len();

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let mut acc = vec![0.0; padded_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let scale = 1.0 / n_fft as f64;
    for k in 0..n_frames {
        buf[0] = raw[(0, k)];
        for f in 1..f_bins {
            buf[f] = raw[(f, k)];
        }
        for f in 1..f_bins - 1 {
            buf[n_fft - f] = raw[(f, k)].conj();
        }
        ifft.process(&mut buf);
        let start = k * hop;
        for n in 0..n_fft {
            acc[start + n] += window[n] * buf[n].re * scale;
        }
    }

    let pad = n_fft / 2;
    if pad + original_length > padded_len {
        return Err(Error::ShapeMismatch(format!(
            "original_length {original_length} incompatible with {n_frames} frames"
        )));
    }
    let mut out = Vec::with_capacity(original_length);
    for p in pad..pad + original_length {
        let d = denom[p];
        out.push(if d > OLA_FLOOR { acc[p] / d } else { 0.0 });
    }
    Ok(out)
}

/// Adjoint of [`istft_raw`] as a real-linear map, for gradient propagation.
///
/// Maps a waveform cotangent of length `original_length` back to a complex
/// spectrogram cotangent with `n_frames` columns.
pub fn istft_raw_adjoint(
    grad: &[f64],
    config: &SpectralConfig,
    n_frames: usize,
    original_length: usize,
) -> Result<Array2<Complex64>> {
    config.validate()?;
    if grad.len() != original_length {
        return Err(Error::ShapeMismatch(format!(
            "gradient length {} != original_length {}",
            grad.len(),
            original_length
        )));
    }
    let n_fft = config.n_fft;
    let f_bins = config.freq_bins();
    let hop = config.hop;
    let window = config.window_samples();
    let denom = ola_denominator(config, n_frames);
    let padded_len = denom.len();
    let pad = n_fft / 2;
    if pad + original_length > padded_len {
        return Err(Error::ShapeMismatch(format!(
            "original_length {original_length} incompatible with {n_frames} frames"
        )));
    }

    let mut gbuf = vec![0.0; padded_len];
    for (j, g) in grad.iter().enumerate() {
        let p = pad + j;
        let d = denom[p];
        if d > OLA_FLOOR {
            gbuf[p] = g / d;
        }
    }

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::zeros((f_bins, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let scale = 1.0 / n_fft as f64;
    for k in 0..n_frames {
        let start = k * hop;
        for n in 0..n_fft {
            buf[n] = Complex64::new(window[n] * gbuf[start + n] * scale, 0.0);
        }
        fft.process(&mut buf);
        out[(0, k)] = buf[0];
        out[(f_bins - 1, k)] = buf[f_bins - 1];
        for f in 1..f_bins - 1 {
            // interior bins carry their Hermitian mirror's contribution too
            out[(f, k)] = buf[f] * 2.0;
        }
    }
    Ok(out)
}

/// Inverse STFT: decompress, resynthesize, crop to the recorded length.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let raw = decompress(&s.data, &s.config)?;
    let samples = istft_raw(&raw, &s.config, s.original_length)?;
    Waveform::new(samples, PIPELINE_RATE)
}

/// Uncentered framed STFT used by spectral-domain losses: frames of `n_fft`
/// samples every `hop`, windowed, no padding beyond the final partial frame.
pub fn frame_stft(samples: &[f64], n_fft: usize, hop: usize, window: &[f64]) -> Array2<Complex64> {
    debug_assert_eq!(window.len(), n_fft);
    let f_bins = n_fft / 2 + 1;
    let n_frames = if samples.len() <= n_fft {
        1
    } else {
        1 + (samples.len() - n_fft).div_ceil(hop)
    };
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::zeros((f_bins, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for k in 0..n_frames {
        let start = k * hop;
        for n in 0..n_fft {
            let x = samples.get(start + n).copied().unwrap_or(0.0);
            buf[n] = Complex64::new(x * window[n], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..f_bins {
            out[(f, k)] = buf[f];
        }
    }
    out
}

/// Adjoint of [`frame_stft`]: windowed overlap-add of the per-frame inverse
/// transform of the half-spectrum cotangent (zero-extended, not mirrored).
pub fn frame_stft_adjoint(
    grad: &Array2<Complex64>,
    n_fft: usize,
    hop: usize,
    window: &[f64],
    sig_len: usize,
) -> Vec<f64> {
    debug_assert_eq!(window.len(), n_fft);
    let f_bins = n_fft / 2 + 1;
    debug_assert_eq!(grad.nrows(), f_bins);
    let n_frames = grad.ncols();
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let mut out = vec![0.0; sig_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for k in 0..n_frames {
        for f in 0..f_bins {
            buf[f] = grad[(f, k)];
        }
        for slot in buf.iter_mut().take(n_fft).skip(f_bins) {
            *slot = Complex64::new(0.0, 0.0);
        }
        ifft.process(&mut buf);
        let start = k * hop;
        for n in 0..n_fft {
            if let Some(o) = out.get_mut(start + n) {
                *o += window[n] * buf[n].re;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SpectralConfig {
        SpectralConfig::default()
    }

    #[test]
    fn compress_hand_values() {
        let c = arr2(&[[Complex64::new(4.0, 0.0), Complex64::new(0.0, 0.0)]]);
        // single-row input is fine for the pointwise transform
        let mut small = cfg();
        small.n_fft = 510;
        let out = compress(&c, &small).unwrap();
        assert_abs_diff_eq!(out[(0, 0)].re, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(out[(0, 0)].im, 0.0, epsilon = 1e-12);
        assert_eq!(out[(0, 1)], Complex64::new(0.0, 0.0));

        let neg = arr2(&[[Complex64::new(-1.0, 0.0)]]);
        let out = compress(&neg, &small).unwrap();
        assert_abs_diff_eq!(out[(0, 0)].re, -0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(out[(0, 0)].im, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn compress_rejects_non_finite() {
        let c = arr2(&[[Complex64::new(f64::NAN, 0.0)]]);
        assert!(matches!(compress(&c, &cfg()), Err(Error::InvalidInput(_))));
        let c = arr2(&[[Complex64::new(0.0, f64::INFINITY)]]);
        assert!(matches!(decompress(&c, &cfg()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn decompress_hand_values() {
        let c = arr2(&[[Complex64::new(0.3, 0.0), Complex64::new(0.0, 0.0)]]);
        let out = decompress(&c, &cfg()).unwrap();
        assert_abs_diff_eq!(out[(0, 0)].re, 4.0, epsilon = 1e-9);
        assert_eq!(out[(0, 1)], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn compress_decompress_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let z = Complex64::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
            let c = arr2(&[[z]]);
            let back = decompress(&compress(&c, &cfg()).unwrap(), &cfg()).unwrap();
            worst = worst.max((back[(0, 0)] - z).norm());
        }
        assert!(worst < 1e-9, "roundtrip error {worst}");
    }

    #[test]
    fn compress_preserves_phase_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let z = Complex64::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            if z.norm() < 1e-6 {
                continue;
            }
            let c = arr2(&[[z, z * 2.0]]);
            let out = compress(&c, &cfg()).unwrap();
            assert_abs_diff_eq!(out[(0, 0)].arg(), z.arg(), epsilon = 1e-12);
            assert!(out[(0, 0)].norm() < out[(0, 1)].norm());
        }
    }

    #[test]
    fn stft_shape_one_second() {
        let samples: Vec<f64> = (0..16000).map(|i| (i as f64 * 0.001).sin() * 0.1).collect();
        let w = Waveform::new(samples, PIPELINE_RATE).unwrap();
        let s = stft(&w, &cfg()).unwrap();
        assert_eq!(s.freq_bins(), 256);
        // T = 1 + floor(16000 / 128)
        assert_eq!(s.n_frames(), 126);
        assert_eq!(s.original_length, 16000);
    }

    #[test]
    fn stft_zeros_gives_zeros() {
        let w = Waveform::new(vec![0.0; 4000], PIPELINE_RATE).unwrap();
        let s = stft(&w, &cfg()).unwrap();
        assert!(s.data.iter().all(|z| z.norm() == 0.0));
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), 4000);
        assert!(back.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stft_empty_rejected() {
        let w = Waveform::new(vec![], PIPELINE_RATE).unwrap();
        assert!(matches!(stft(&w, &cfg()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sinusoid_concentrates_in_bin() {
        let c = cfg();
        let bin = 16usize;
        let freq = bin as f64 * PIPELINE_RATE as f64 / c.n_fft as f64;
        let samples: Vec<f64> = (0..16000)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / PIPELINE_RATE as f64).sin() * 0.3)
            .collect();
        let w = Waveform::new(samples, PIPELINE_RATE).unwrap();
        let s = stft(&w, &c).unwrap();
        for k in 3..s.n_frames() - 3 {
            let col = s.data.column(k);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, bin, "frame {k}");
        }
    }

    #[test]
    fn istft_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &len in &[777usize, 16000, 1000] {
            let samples: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Waveform::new(samples.clone(), PIPELINE_RATE).unwrap();
            let s = stft(&w, &cfg()).unwrap();
            let back = istft(&s).unwrap();
            assert_eq!(back.len(), len);
            let err = back
                .samples()
                .iter()
                .zip(&samples)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-6, "len {len}: max abs error {err}");
        }
    }

    #[test]
    fn istft_rejects_bin_mismatch() {
        let data = Array2::zeros((100, 4));
        assert!(ComplexSpectrogram::new(data, cfg(), 100).is_err());
    }

    #[test]
    fn short_input_zero_padded_to_one_frame() {
        let w = Waveform::new(vec![0.5; 100], PIPELINE_RATE).unwrap();
        let s = stft(&w, &cfg()).unwrap();
        assert_eq!(s.n_frames(), 1 + 510 / 128);
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), 100);
    }

    #[test]
    fn istft_adjoint_matches_inner_product() {
        let c = SpectralConfig {
            n_fft: 32,
            hop: 8,
            ..cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let orig_len = 70usize;
        let n_frames = c.n_frames(orig_len);
        let f_bins = c.freq_bins();
        let spec = Array2::from_shape_fn((f_bins, n_frames), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let g: Vec<f64> = (0..orig_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let fwd = istft_raw(&spec, &c, orig_len).unwrap();
        let adj = istft_raw_adjoint(&g, &c, n_frames, orig_len).unwrap();

        let lhs: f64 = fwd.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = spec
            .iter()
            .zip(adj.iter())
            .map(|(x, y)| x.re * y.re + x.im * y.im)
            .sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn frame_stft_adjoint_matches_inner_product() {
        let n_fft = 16;
        let hop = 5;
        let window = periodic_hann(n_fft);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sig_len = 53;
        let x: Vec<f64> = (0..sig_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fwd = frame_stft(&x, n_fft, hop, &window);
        let g = Array2::from_shape_fn(fwd.dim(), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let adj = frame_stft_adjoint(&g, n_fft, hop, &window, sig_len);
        let lhs: f64 = fwd
            .iter()
            .zip(g.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9 * (1.0 + lhs.abs()));
    }
}
