//! Auxiliary training losses: SI-SDR and a pluggable perceptual loss.
//!
//! The SI-SDR loss follows `-10*log10(||w*r||^2 / ||e - w*r||^2)` with the
//! optimal scale `w = <e,r>/<r,r>`. Two numerical guards keep it finite and
//! are part of the contract: the residual energy is floored at
//! [`SI_SDR_EPS`] (so a perfect estimate reports the documented cap instead
//! of -inf), and the projected energy is floored at [`SI_SDR_NUM_FLOOR`]
//! (so an estimate orthogonal to the reference stays finite).
//!
//! A full differentiable PESQ is intentionally not reimplemented here; the
//! [`PerceptualLoss`] trait is the adapter contract (16 kHz mono in, scalar
//! out, lower is better), and [`LogSpectralSurrogate`] is a built-in
//! differentiable stand-in so training and tests run without external
//! dependencies.

use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::{self, Waveform, PIPELINE_RATE};

/// Residual-energy floor in the SI-SDR denominator.
pub const SI_SDR_EPS: f64 = 1e-8;

/// Projected-energy floor in the SI-SDR numerator.
pub const SI_SDR_NUM_FLOOR: f64 = 1e-30;

const LOG10E_TIMES_10: f64 = 10.0 / std::f64::consts::LN_10;

fn si_sdr_check(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: estimate {} vs reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::InvalidInput("empty signals".into()));
    }
    let rr: f64 = reference.samples().iter().map(|x| x * x).sum();
    if rr == 0.0 {
        return Err(Error::InvalidInput("reference is identically zero".into()));
    }
    Ok(rr)
}

/// Scale-invariant SDR loss (negated SI-SDR in dB); lower is better.
pub fn si_sdr_loss(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    let rr = si_sdr_check(estimate, reference)?;
    let er: f64 = estimate
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| e * r)
        .sum();
    let omega = er / rr;
    let num = (omega * omega * rr).max(SI_SDR_NUM_FLOOR);
    let resid: f64 = estimate
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| {
            let d = e - omega * r;
            d * d
        })
        .sum();
    let den = resid.max(SI_SDR_EPS);
    Ok(-10.0 * (num / den).log10())
}

/// Graph version of [`si_sdr_loss`] against a constant reference.
pub fn si_sdr_loss_graph(tape: &mut Tape, estimate: Var, reference: &[f64]) -> Result<Var> {
    let rr: f64 = reference.iter().map(|x| x * x).sum();
    if rr == 0.0 {
        return Err(Error::InvalidInput("reference is identically zero".into()));
    }
    if tape.value(estimate).len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: estimate {} vs reference {}",
            tape.value(estimate).len(),
            reference.len()
        )));
    }
    let r = tape.constant(
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[reference.len()]), reference.to_vec())
            .unwrap(),
    );
    let er_prod = tape.mul(estimate, r);
    let er = tape.sum(er_prod);
    let omega = tape.scale(er, 1.0 / rr);
    let omega_sq = tape.mul(omega, omega);
    let num_raw = tape.scale(omega_sq, rr);
    let num = tape.max_const(num_raw, SI_SDR_NUM_FLOOR);
    let omega_r = tape.mul_scalar(r, omega);
    let resid = tape.sub(estimate, omega_r);
    let resid_sq = tape.mul(resid, resid);
    let resid_energy = tape.sum(resid_sq);
    let den = tape.max_const(resid_energy, SI_SDR_EPS);
    let ln_num = tape.ln(num);
    let ln_den = tape.ln(den);
    let diff = tape.sub(ln_num, ln_den);
    Ok(tape.scale(diff, -LOG10E_TIMES_10))
}

/// Adapter contract for perceptual losses. Deterministic, 16 kHz mono in,
/// finite scalar out, lower is better.
pub trait PerceptualLoss: Send + Sync {
    fn name(&self) -> &str;

    /// Whether [`PerceptualLoss::loss_graph`] is available for training.
    fn differentiable(&self) -> bool;

    fn evaluate(&self, estimate: &Waveform, reference: &Waveform) -> Result<f64>;

    /// Build the loss on a tape for gradient-based training.
    fn loss_graph(&self, _tape: &mut Tape, _estimate: Var, _reference: &Waveform) -> Result<Var> {
        Err(Error::Evaluator {
            name: self.name().to_string(),
            detail: "evaluator is not differentiable".into(),
        })
    }
}

/// Evaluate a perceptual loss with the pipeline's rate checks, wrapping any
/// failure with the evaluator's name.
pub fn pesq_loss(
    f: &dyn PerceptualLoss,
    estimate: &Waveform,
    reference: &Waveform,
) -> Result<f64> {
    if estimate.sample_rate() != PIPELINE_RATE || reference.sample_rate() != PIPELINE_RATE {
        return Err(Error::InvalidInput(format!(
            "perceptual loss expects {PIPELINE_RATE} Hz signals, got {} and {}",
            estimate.sample_rate(),
            reference.sample_rate()
        )));
    }
    let value = f
        .evaluate(estimate, reference)
        .map_err(|e| Error::Evaluator {
            name: f.name().to_string(),
            detail: e.to_string(),
        })?;
    if !value.is_finite() {
        return Err(Error::Evaluator {
            name: f.name().to_string(),
            detail: format!("returned non-finite value {value}"),
        });
    }
    Ok(value)
}

/// Built-in differentiable perceptual surrogate: reference-weighted
/// log-magnitude spectral distance.
///
/// `loss = mean_ij( w_ij * (ln m_e - ln m_r)^2 )` over an uncentered framed
/// STFT, with smoothed magnitudes `m = sqrt(|X|^2 + delta^2)` and weights
/// `w = m_r / mean(m_r)` taken from the reference. The weighting makes the
/// loss asymmetric in its arguments, like the intrusive metrics it stands in
/// for. Its minimum is 0, attained at `estimate == reference`.
#[derive(Debug, Clone)]
pub struct LogSpectralSurrogate {
    pub n_fft: usize,
    pub hop: usize,
    pub delta: f64,
}

impl Default for LogSpectralSurrogate {
    fn default() -> Self {
        Self {
            n_fft: 256,
            hop: 128,
            delta: 1e-6,
        }
    }
}

impl LogSpectralSurrogate {
    /// Smoothed magnitudes and normalized weights of a reference signal.
    fn reference_maps(&self, reference: &Waveform) -> (Array2<f64>, Array2<f64>) {
        let window = spectral::periodic_hann(self.n_fft);
        let spec = spectral::frame_stft(reference.samples(), self.n_fft, self.hop, &window);
        let mags = spec.mapv(|z| (z.norm_sqr() + self.delta * self.delta).sqrt());
        let mean = mags.mean().unwrap_or(self.delta).max(self.delta);
        let weights = mags.mapv(|m| m / mean);
        (mags, weights)
    }
}

impl PerceptualLoss for LogSpectralSurrogate {
    fn name(&self) -> &str {
        "log-spectral"
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn evaluate(&self, estimate: &Waveform, reference: &Waveform) -> Result<f64> {
        if estimate.len() != reference.len() {
            return Err(Error::InvalidInput(format!(
                "length mismatch: {} vs {}",
                estimate.len(),
                reference.len()
            )));
        }
        let window = spectral::periodic_hann(self.n_fft);
        let est_spec = spectral::frame_stft(estimate.samples(), self.n_fft, self.hop, &window);
        let est_mag = est_spec.mapv(|z| (z.norm_sqr() + self.delta * self.delta).sqrt());
        let (ref_mag, weights) = self.reference_maps(reference);
        let n = est_mag.len() as f64;
        let mut acc = 0.0;
        for ((e, r), w) in est_mag.iter().zip(ref_mag.iter()).zip(weights.iter()) {
            let d = e.ln() - r.ln();
            acc += w * d * d;
        }
        Ok(acc / n)
    }

    fn loss_graph(&self, tape: &mut Tape, estimate: Var, reference: &Waveform) -> Result<Var> {
        if tape.value(estimate).len() != reference.len() {
            return Err(Error::InvalidInput(format!(
                "length mismatch: {} vs {}",
                tape.value(estimate).len(),
                reference.len()
            )));
        }
        let window = Arc::new(spectral::periodic_hann(self.n_fft));
        let (ref_mag, weights) = self.reference_maps(reference);
        let ln_ref = tape.constant(ref_mag.mapv(f64::ln).into_dyn());
        let w = tape.constant(weights.into_dyn());

        let spec = tape.frame_stft(estimate, self.n_fft, self.hop, window);
        let sq = tape.mul(spec, spec);
        let mag_sq = tape.sum_channels(sq);
        let smoothed = tape.add_const(mag_sq, self.delta * self.delta);
        let mag = tape.sqrt(smoothed);
        let ln_mag = tape.ln(mag);
        let d = tape.sub(ln_mag, ln_ref);
        let d_sq = tape.mul(d, d);
        let weighted = tape.mul(d_sq, w);
        Ok(tape.mean(weighted))
    }
}
