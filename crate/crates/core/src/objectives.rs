//! Flow-matching training objectives and prediction-space conversions.
//!
//! Three interchangeable objectives are implemented: direct velocity
//! regression, clean-signal (x1) regression, and x1 regression under EDM
//! preconditioning, where the denoiser is
//! `D(x_t, y, t) = c_skip(t)*x_t + c_out(t)*F(c_in(t)*x_t, c_in(t)*y, t)`
//! and the squared error is weighted by `lambda(t)`. The coefficients
//! satisfy `lambda*c_out^2 = 1` and `c_in^2*(sigma_data^2 + s^2) = 1`, which
//! is what makes the effective loss weighting uniform across time.
//!
//! Every objective exposes both an x1-space and a velocity-space view of its
//! prediction, related by `x1_hat = x_t + (1-t)*v_hat`.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::aux::{self, PerceptualLoss};
use crate::backbone::{Backbone, DiffBackbone};
use crate::error::{Error, Result};
use crate::path::PathSample;
use crate::spectral::{self, SpectralConfig};
use crate::tensor;

/// Which quantity the network is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Velocity,
    X1,
    X1Edm,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [ObjectiveKind::Velocity, ObjectiveKind::X1, ObjectiveKind::X1Edm];

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::Velocity => "velocity",
            ObjectiveKind::X1 => "x1",
            ObjectiveKind::X1Edm => "x1-edm",
        }
    }

    /// Tuned auxiliary-loss weights `(alpha_p, alpha_s)` for this objective.
    pub fn recommended_alphas(&self) -> (f64, f64) {
        match self {
            ObjectiveKind::Velocity => (5e-2, 5e-3),
            ObjectiveKind::X1 => (1e-3, 1e-4),
            ObjectiveKind::X1Edm => (1e-6, 1e-7),
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "velocity" | "v" => Ok(ObjectiveKind::Velocity),
            "x1" => Ok(ObjectiveKind::X1),
            "x1-edm" | "x1_edm" => Ok(ObjectiveKind::X1Edm),
            other => Err(Error::Config(format!(
                "unknown objective '{other}' (expected velocity, x1, or x1-edm)"
            ))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the preconditioner maps the path time to its noise level
/// `s = map(t) * sigma_max`.
///
/// `T` follows the published coefficient formulas verbatim; `OneMinusT`
/// matches the path's actual noise schedule `sigma_t = (1-t)*sigma_max` and
/// is kept for experimentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLevelMap {
    #[default]
    T,
    OneMinusT,
}

/// EDM preconditioning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecondConfig {
    /// Standard deviation of the clean-data distribution.
    pub sigma_data: f64,
    /// Shared with the path configuration.
    pub sigma_max: f64,
    pub noise_level_map: NoiseLevelMap,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        Self {
            sigma_data: 0.1,
            sigma_max: 0.5,
            noise_level_map: NoiseLevelMap::T,
        }
    }
}

impl PrecondConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config(format!(
                "sigma_data must be > 0, got {}",
                self.sigma_data
            )));
        }
        if !(self.sigma_max > 0.0) {
            return Err(Error::Config(format!(
                "sigma_max must be > 0, got {}",
                self.sigma_max
            )));
        }
        Ok(())
    }

    fn noise_level(&self, t: f64) -> f64 {
        match self.noise_level_map {
            NoiseLevelMap::T => t * self.sigma_max,
            NoiseLevelMap::OneMinusT => (1.0 - t) * self.sigma_max,
        }
    }
}

/// The four preconditioning coefficients at one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub lambda: f64,
}

/// Input/output scalings only; total in `t` (no `lambda`).
pub fn edm_scalings(t: f64, config: &PrecondConfig) -> (f64, f64, f64) {
    let s = config.noise_level(t);
    let sd2 = config.sigma_data * config.sigma_data;
    let denom = sd2 + s * s;
    let c_skip = sd2 / denom;
    let c_out = s * config.sigma_data / denom.sqrt();
    let c_in = 1.0 / denom.sqrt();
    (c_skip, c_out, c_in)
}

/// All four coefficients; fails where the loss weight diverges (`s = 0`).
pub fn edm_coefficients(t: f64, config: &PrecondConfig) -> Result<EdmCoeffs> {
    config.validate()?;
    let s = config.noise_level(t);
    if s == 0.0 {
        return Err(Error::SingularWeight {
            t,
            detail: "lambda diverges where the noise level vanishes".into(),
        });
    }
    let (c_skip, c_out, c_in) = edm_scalings(t, config);
    let sd2 = config.sigma_data * config.sigma_data;
    let lambda = (s * s + sd2) / (s * s * sd2);
    Ok(EdmCoeffs { c_skip, c_out, c_in, lambda })
}

/// Evaluate the preconditioned denoiser
/// `D(x_t, y, t) = c_skip*x_t + c_out*net(c_in*x_t, c_in*y, t)`.
pub fn precondition(
    net: &dyn Backbone,
    x_t: &Array2<Complex64>,
    y: &Array2<Complex64>,
    t: f64,
    config: &PrecondConfig,
) -> Result<Array2<Complex64>> {
    if x_t.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "x_t {:?} vs y {:?}",
            x_t.dim(),
            y.dim()
        )));
    }
    let (c_skip, c_out, c_in) = edm_scalings(t, config);
    let inner = net.apply(&x_t.mapv(|z| z * c_in), &y.mapv(|z| z * c_in), t);
    Ok(x_t.mapv(|z| z * c_skip) + inner.mapv(|z| z * c_out))
}

/// Velocity-space view of an x1 prediction: `(x1_pred - x_t) / (1 - t)`.
pub fn v_from_x1(
    x1_pred: &Array2<Complex64>,
    x_t: &Array2<Complex64>,
    t: f64,
) -> Result<Array2<Complex64>> {
    if t >= 1.0 {
        return Err(Error::Singularity {
            t,
            detail: "velocity view of an x1 prediction is undefined at t >= 1".into(),
        });
    }
    Ok((x1_pred - x_t).mapv(|z| z / (1.0 - t)))
}

/// x1-space view of a velocity prediction: `x_t + (1 - t) * v_pred`.
pub fn x1_from_v(
    v_pred: &Array2<Complex64>,
    x_t: &Array2<Complex64>,
    t: f64,
) -> Array2<Complex64> {
    x_t + &v_pred.mapv(|z| z * (1.0 - t))
}

/// Per-batch loss value together with both prediction views.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub x1_hat: Vec<Array2<Complex64>>,
    pub v_hat: Vec<Array2<Complex64>>,
}

/// Conditional flow-matching loss of a batch under the chosen objective.
///
/// Reductions are means over the batch and over complex elements (the
/// squared error of one element being `re^2 + im^2`); for the EDM variant
/// `lambda(t)` multiplies each sample's mean squared error before the batch
/// average.
pub fn cfm_loss(
    kind: ObjectiveKind,
    net: &dyn Backbone,
    batch: &[PathSample],
    precond: &PrecondConfig,
) -> Result<ObjectiveOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut loss = 0.0;
    let mut x1_hat = Vec::with_capacity(batch.len());
    let mut v_hat = Vec::with_capacity(batch.len());
    for sample in batch {
        if sample.t >= 1.0 {
            return Err(Error::Singularity {
                t: sample.t,
                detail: "training samples must have t < 1".into(),
            });
        }
        match kind {
            ObjectiveKind::Velocity => {
                let out = net.apply(&sample.x_t, &sample.y, sample.t);
                loss += tensor::mean_sq_complex_diff(&out, &sample.v_target);
                x1_hat.push(x1_from_v(&out, &sample.x_t, sample.t));
                v_hat.push(out);
            }
            ObjectiveKind::X1 => {
                let out = net.apply(&sample.x_t, &sample.y, sample.t);
                loss += tensor::mean_sq_complex_diff(&out, &sample.x1);
                v_hat.push(v_from_x1(&out, &sample.x_t, sample.t)?);
                x1_hat.push(out);
            }
            ObjectiveKind::X1Edm => {
                let coeffs = edm_coefficients(sample.t, precond)?;
                let denoised = precondition(net, &sample.x_t, &sample.y, sample.t, precond)?;
                loss += coeffs.lambda * tensor::mean_sq_complex_diff(&denoised, &sample.x1);
                v_hat.push(v_from_x1(&denoised, &sample.x_t, sample.t)?);
                x1_hat.push(denoised);
            }
        }
    }
    Ok(ObjectiveOutput {
        loss: loss / batch.len() as f64,
        x1_hat,
        v_hat,
    })
}

/// Waveform length used when synthesizing a spectrogram crop that has no
/// recorded original length: the shortest length consistent with its frame
/// count under centered analysis.
pub fn crop_wave_len(n_frames: usize, config: &SpectralConfig) -> usize {
    n_frames.saturating_sub(1) * config.hop
}

fn crop_waveform(spec: &Array2<Complex64>, config: &SpectralConfig) -> Result<Vec<f64>> {
    let raw = spectral::decompress(spec, config)?;
    spectral::istft_raw(&raw, config, crop_wave_len(spec.ncols(), config))
}

/// Combined objective: CFM term plus weighted perceptual and SI-SDR terms
/// evaluated on time-domain reconstructions of `x1_hat` and `x1`. Auxiliary
/// terms with zero weight are skipped entirely.
pub fn combined_loss(
    kind: ObjectiveKind,
    net: &dyn Backbone,
    batch: &[PathSample],
    precond: &PrecondConfig,
    alpha_p: f64,
    alpha_s: f64,
    perceptual: &dyn PerceptualLoss,
    frontend: &SpectralConfig,
) -> Result<f64> {
    if !(alpha_p.is_finite() && alpha_p >= 0.0 && alpha_s.is_finite() && alpha_s >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "auxiliary weights must be finite and non-negative, got alpha_p={alpha_p} alpha_s={alpha_s}"
        )));
    }
    let objective = cfm_loss(kind, net, batch, precond)?;
    if alpha_p == 0.0 && alpha_s == 0.0 {
        return Ok(objective.loss);
    }

    let mut pesq_acc = 0.0;
    let mut sisdr_acc = 0.0;
    for (sample, x1_hat) in batch.iter().zip(&objective.x1_hat) {
        let est = crop_waveform(x1_hat, frontend)?;
        let reference = crop_waveform(&sample.x1, frontend)?;
        let est_w = spectral::Waveform::new(est, spectral::PIPELINE_RATE)?;
        let ref_w = spectral::Waveform::new(reference, spectral::PIPELINE_RATE)?;
        if alpha_p > 0.0 {
            pesq_acc += aux::pesq_loss(perceptual, &est_w, &ref_w).map_err(|e| match e {
                Error::Evaluator { name, detail } => Error::Evaluator {
                    name,
                    detail: format!("{detail} (batch sample at t={})", sample.t),
                },
                other => other,
            })?;
        }
        if alpha_s > 0.0 {
            sisdr_acc += aux::si_sdr_loss(&est_w, &ref_w)?;
        }
    }
    let n = batch.len() as f64;
    Ok(objective.loss + alpha_p * pesq_acc / n + alpha_s * sisdr_acc / n)
}

// ---------------------------------------------------------------------------
// Tape-level builders used by the trainer.
// ---------------------------------------------------------------------------

/// Loss pieces of one sample's graph.
pub struct SampleLossGraph {
    pub total: Var,
    pub cfm: Var,
    pub pesq: Option<Var>,
    pub sisdr: Option<Var>,
    pub x1_hat: Var,
}

/// Inverse of the amplitude compression, built from smooth primitives:
/// `out = x * m^(1/alpha - 1) / beta^(1/alpha)` with
/// `m = sqrt(|x|^2 + 1e-24)`. Matches [`crate::spectral::decompress`] away
/// from vanishing magnitudes.
pub fn decompress_graph(tape: &mut Tape, x: Var, config: &SpectralConfig) -> Var {
    let sq = tape.mul(x, x);
    let mag_sq = tape.sum_channels(sq);
    let smoothed = tape.add_const(mag_sq, 1e-24);
    let mag = tape.sqrt(smoothed);
    let exponent = 1.0 / config.alpha - 1.0;
    let powed = if exponent == 1.0 { mag } else { tape.powf(mag, exponent) };
    let factor = tape.scale(powed, config.beta.powf(-1.0 / config.alpha));
    tape.mul_broadcast_channels(x, factor)
}

/// Build one sample's combined loss on a tape. `params` are the backbone's
/// parameter leaves, registered by the caller in `net.params()` order.
#[allow(clippy::too_many_arguments)]
pub fn combined_sample_loss_graph(
    tape: &mut Tape,
    kind: ObjectiveKind,
    net: &dyn DiffBackbone,
    params: &[Var],
    sample: &PathSample,
    precond: &PrecondConfig,
    alpha_p: f64,
    alpha_s: f64,
    perceptual: Option<&dyn PerceptualLoss>,
    frontend: &SpectralConfig,
) -> Result<SampleLossGraph> {
    if sample.t >= 1.0 {
        return Err(Error::Singularity {
            t: sample.t,
            detail: "training samples must have t < 1".into(),
        });
    }
    let n_elems = (sample.x1.len()) as f64;
    let x_t = tape.constant(tensor::complex_to_dyn(&sample.x_t));
    let y = tape.constant(tensor::complex_to_dyn(&sample.y));

    let (per_sample_weight, pred, target, x1_hat) = match kind {
        ObjectiveKind::Velocity => {
            let out = net.forward_graph(tape, params, x_t, y, sample.t);
            let target = tape.constant(tensor::complex_to_dyn(&sample.v_target));
            let scaled = tape.scale(out, 1.0 - sample.t);
            let x1_hat = tape.add(x_t, scaled);
            (1.0, out, target, x1_hat)
        }
        ObjectiveKind::X1 => {
            let out = net.forward_graph(tape, params, x_t, y, sample.t);
            let target = tape.constant(tensor::complex_to_dyn(&sample.x1));
            (1.0, out, target, out)
        }
        ObjectiveKind::X1Edm => {
            let coeffs = edm_coefficients(sample.t, precond)?;
            let x_in = tape.scale(x_t, coeffs.c_in);
            let y_in = tape.scale(y, coeffs.c_in);
            let raw = net.forward_graph(tape, params, x_in, y_in, sample.t);
            let skip = tape.scale(x_t, coeffs.c_skip);
            let scaled = tape.scale(raw, coeffs.c_out);
            let denoised = tape.add(skip, scaled);
            let target = tape.constant(tensor::complex_to_dyn(&sample.x1));
            (coeffs.lambda, denoised, target, denoised)
        }
    };

    let diff = tape.sub(pred, target);
    let sq = tape.mul(diff, diff);
    let sum = tape.sum(sq);
    // mean over complex elements: divide by F*T (the (2,F,T) tensor holds
    // re^2 and im^2 separately, which sum to |.|^2 per element)
    let cfm = tape.scale(sum, per_sample_weight / n_elems);

    let mut total = cfm;
    let mut pesq_term = None;
    let mut sisdr_term = None;
    if alpha_p > 0.0 || alpha_s > 0.0 {
        let wave_len = crop_wave_len(sample.x1.ncols(), frontend);
        let raw = decompress_graph(tape, x1_hat, frontend);
        let est = tape.istft(raw, *frontend, wave_len);
        let reference = crop_waveform(&sample.x1, frontend)?;
        let ref_wave = spectral::Waveform::new(reference, spectral::PIPELINE_RATE)?;
        if alpha_p > 0.0 {
            let p = perceptual.ok_or_else(|| Error::Config(
                "alpha_p > 0 requires a perceptual loss".into(),
            ))?;
            if !p.differentiable() {
                return Err(Error::Evaluator {
                    name: p.name().to_string(),
                    detail: "evaluator is not differentiable; cannot be trained against".into(),
                });
            }
            let term = p.loss_graph(tape, est, &ref_wave)?;
            let weighted = tape.scale(term, alpha_p);
            total = tape.add(total, weighted);
            pesq_term = Some(term);
        }
        if alpha_s > 0.0 {
            let term = aux::si_sdr_loss_graph(tape, est, ref_wave.samples())?;
            let weighted = tape.scale(term, alpha_s);
            total = tape.add(total, weighted);
            sisdr_term = Some(term);
        }
    }

    Ok(SampleLossGraph {
        total,
        cfm,
        pesq: pesq_term,
        sisdr: sisdr_term,
        x1_hat,
    })
}
