//! Few-step ODE integration of the learned velocity field.
//!
//! Inference initializes from the noisy prior `x0 ~ N(y, sigma_max^2 I)` and
//! integrates `dx/dt = v(x, y, t)` over a uniform grid on
//! `[t_start, t_end]`. The field is never evaluated at `t_end` itself (the
//! last Euler evaluation sits at `t_end - h`, midpoint at `t_end - h/2`), so
//! x1-derived fields never divide by zero.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{wrap_objective_head, Backbone};
use crate::error::{Error, Result};
use crate::objectives::{ObjectiveKind, PrecondConfig};
use crate::path::{sample_prior, PathConfig};
use crate::spectral::ComplexSpectrogram;

type Spec = Array2<Complex64>;

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OdeScheme {
    #[default]
    Euler,
    Midpoint,
}

/// Sampler parameters; `n_steps` is the paper-default 5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub scheme: OdeScheme,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 5,
            t_start: 0.0,
            t_end: 1.0,
            scheme: OdeScheme::Euler,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if !(self.t_start >= 0.0 && self.t_start < self.t_end && self.t_end <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= t_start < t_end <= 1, got [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }
}

/// A velocity field conditioned on the noisy observation.
pub trait VelocityField {
    fn eval(&self, x: &Spec, y: &Spec, t: f64) -> Result<Spec>;
}

impl<F> VelocityField for F
where
    F: Fn(&Spec, &Spec, f64) -> Result<Spec>,
{
    fn eval(&self, x: &Spec, y: &Spec, t: f64) -> Result<Spec> {
        self(x, y, t)
    }
}

fn check_state(x: &Spec, step: usize, t: f64) -> Result<()> {
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Divergence { step, t });
    }
    Ok(())
}

/// Integrate the field from `x0` over the configured uniform grid.
pub fn integrate(
    velocity: &dyn VelocityField,
    x0: &Spec,
    y: &Spec,
    config: &SamplerConfig,
) -> Result<Spec> {
    config.validate()?;
    check_state(x0, 0, config.t_start)?;
    let h = (config.t_end - config.t_start) / config.n_steps as f64;
    let mut x = x0.clone();
    for step in 0..config.n_steps {
        let t = config.t_start + step as f64 * h;
        match config.scheme {
            OdeScheme::Euler => {
                let v = velocity.eval(&x, y, t)?;
                x = &x + &v.mapv(|z| z * h);
            }
            OdeScheme::Midpoint => {
                let v1 = velocity.eval(&x, y, t)?;
                let x_mid = &x + &v1.mapv(|z| z * (h / 2.0));
                check_state(&x_mid, step, t + h / 2.0)?;
                let v2 = velocity.eval(&x_mid, y, t + h / 2.0)?;
                x = &x + &v2.mapv(|z| z * h);
            }
        }
        check_state(&x, step, t)?;
    }
    Ok(x)
}

/// Enhance one noisy spectrogram: draw the prior, build the velocity field
/// for the objective the network was trained under, and integrate.
pub fn enhance<R: Rng + ?Sized>(
    net: &dyn Backbone,
    kind: ObjectiveKind,
    y_spec: &ComplexSpectrogram,
    path: &PathConfig,
    precond: &PrecondConfig,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<ComplexSpectrogram> {
    let x0 = sample_prior(&y_spec.data, path, rng);
    let head = wrap_objective_head(net, kind, precond);
    let field = move |x: &Spec, y: &Spec, t: f64| head.velocity(x, y, t);
    let out = integrate(&field, &x0, &y_spec.data, sampler)?;
    ComplexSpectrogram::new(out, y_spec.config, y_spec.original_length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::standard_complex_noise;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_spec(v: f64) -> Spec {
        arr2(&[[Complex64::new(v, 0.0)]])
    }

    fn oracle_field(x1: Spec) -> impl VelocityField {
        move |x: &Spec, _y: &Spec, t: f64| Ok((&x1 - x).mapv(|z| z / (1.0 - t)))
    }

    #[test]
    fn one_euler_step_is_exact_on_oracle_field() {
        let field = oracle_field(scalar_spec(5.0));
        let y = scalar_spec(0.0);
        for &(x_t, t) in &[(0.0, 0.0), (-3.0, 0.25), (7.5, 0.9), (1.0, 0.5)] {
            let cfg = SamplerConfig {
                n_steps: 1,
                t_start: t,
                t_end: 1.0,
                scheme: OdeScheme::Euler,
            };
            let out = integrate(&field, &scalar_spec(x_t), &y, &cfg).unwrap();
            assert!((out[(0, 0)].re - 5.0).abs() < 1e-12, "from ({x_t}, {t})");
        }
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let field = |_: &Spec, _: &Spec, _: f64| Ok(scalar_spec(1.0));
        for n in [1, 3, 5, 17] {
            let cfg = SamplerConfig {
                n_steps: n,
                ..SamplerConfig::default()
            };
            let out = integrate(&field, &scalar_spec(0.0), &scalar_spec(0.0), &cfg).unwrap();
            assert_abs_diff_eq!(out[(0, 0)].re, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn five_euler_steps_stay_on_the_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let x1 = standard_complex_noise((6, 4), &mut rng);
        let x0 = standard_complex_noise((6, 4), &mut rng);
        let field = oracle_field(x1.clone());
        let cfg = SamplerConfig::default();
        let out = integrate(&field, &x0, &x1, &cfg).unwrap();
        let err = (&out - &x1).iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grid_never_evaluates_at_t_end() {
        use std::cell::RefCell;
        let ts = RefCell::new(Vec::new());
        let field = |_x: &Spec, _y: &Spec, t: f64| {
            ts.borrow_mut().push(t);
            Ok(scalar_spec(0.0))
        };
        for scheme in [OdeScheme::Euler, OdeScheme::Midpoint] {
            ts.borrow_mut().clear();
            let cfg = SamplerConfig {
                n_steps: 5,
                scheme,
                ..SamplerConfig::default()
            };
            integrate(&field, &scalar_spec(0.0), &scalar_spec(0.0), &cfg).unwrap();
            let max_t = ts.borrow().iter().cloned().fold(0.0f64, f64::max);
            let bound = match scheme {
                OdeScheme::Euler => 1.0 - 0.2,
                OdeScheme::Midpoint => 1.0 - 0.1,
            };
            assert_abs_diff_eq!(max_t, bound, epsilon = 1e-12);
        }
    }

    #[test]
    fn divergence_reports_step() {
        let field = |_: &Spec, _: &Spec, t: f64| {
            Ok(scalar_spec(if t > 0.3 { f64::NAN } else { 1.0 }))
        };
        let cfg = SamplerConfig::default();
        match integrate(&field, &scalar_spec(0.0), &scalar_spec(0.0), &cfg) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn midpoint_is_second_order_on_logistic_field() {
        // x' = x(1-x), x(0) = 0.2, exact solution known in closed form
        let field = |x: &Spec, _y: &Spec, _t: f64| {
            Ok(x.mapv(|z| z * (Complex64::new(1.0, 0.0) - z)))
        };
        let exact = {
            let x0 = 0.2f64;
            let c = (1.0 - x0) / x0;
            1.0 / (1.0 + c * (-1.0f64).exp())
        };
        let err_at = |n: usize| {
            let cfg = SamplerConfig {
                n_steps: n,
                scheme: OdeScheme::Midpoint,
                ..SamplerConfig::default()
            };
            let out = integrate(&field, &scalar_spec(0.2), &scalar_spec(0.0), &cfg).unwrap();
            (out[(0, 0)].re - exact).abs()
        };
        let e5 = err_at(5);
        let e10 = err_at(10);
        let e20 = err_at(20);
        let r1 = e5 / e10;
        let r2 = e10 / e20;
        assert!((3.0..=5.0).contains(&r1), "ratio {r1} (errors {e5} {e10})");
        assert!((3.0..=5.0).contains(&r2), "ratio {r2} (errors {e10} {e20})");
    }

    #[test]
    fn enhance_is_deterministic_under_seed() {
        use crate::backbone::reference_net;
        use crate::spectral::{stft, SpectralConfig, Waveform, PIPELINE_RATE};

        let cfg = SpectralConfig {
            n_fft: 64,
            hop: 16,
            ..SpectralConfig::default()
        };
        let samples: Vec<f64> = (0..400).map(|i| (i as f64 * 0.05).sin() * 0.2).collect();
        let y = stft(&Waveform::new(samples, PIPELINE_RATE).unwrap(), &cfg).unwrap();
        let net = reference_net(4, 1, 3).unwrap();
        let path = PathConfig::default();
        let precond = PrecondConfig::default();
        let sampler = SamplerConfig::default();

        let a = enhance(
            &net,
            ObjectiveKind::X1Edm,
            &y,
            &path,
            &precond,
            &sampler,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        let b = enhance(
            &net,
            ObjectiveKind::X1Edm,
            &y,
            &path,
            &precond,
            &sampler,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn oracle_x1_predictor_with_zero_prior_noise_is_one_step_exact() {
        struct X1Net {
            x1: Spec,
        }
        impl Backbone for X1Net {
            fn apply(&self, _x: &Spec, _y: &Spec, _t: f64) -> Spec {
                self.x1.clone()
            }
            fn parameter_count(&self) -> usize {
                0
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let x1 = standard_complex_noise((5, 3), &mut rng);
        let y = ComplexSpectrogram {
            data: standard_complex_noise((5, 3), &mut rng),
            config: crate::spectral::SpectralConfig {
                n_fft: 8,
                hop: 4,
                ..Default::default()
            },
            original_length: 8,
        };
        let path = PathConfig {
            sigma_max: 0.0,
            ..PathConfig::default()
        };
        let sampler = SamplerConfig {
            n_steps: 1,
            ..SamplerConfig::default()
        };
        let out = enhance(
            &X1Net { x1: x1.clone() },
            ObjectiveKind::X1,
            &y,
            &path,
            &PrecondConfig::default(),
            &sampler,
            &mut rng,
        )
        .unwrap();
        let err = (&out.data - &x1).iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        assert!(err < 1e-12, "{err}");
    }
}
