//! Conditional optimal-transport probability path between noisy and clean
//! spectrograms.
//!
//! The path interpolates `mu_t = t*x1 + (1-t)*y` with noise scale
//! `sigma_t = (1-t)*sigma_max`, so `x_t = t*x1 + (1-t)*y + (1-t)*sigma_max*eps`.
//! The regression target is the path's time derivative,
//! `v_t = (x1 - x_t)/(1-t)`, which is constant along the path for a fixed
//! `(x1, y, eps)` triple.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the conditional path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    /// Noise scale at t=0.
    pub sigma_max: f64,
    /// Lower bound of the training time distribution, t ~ U(t_eps, 1).
    pub t_eps: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            sigma_max: 0.5,
            t_eps: 0.03,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_max > 0.0) {
            return Err(Error::Config(format!("sigma_max must be > 0, got {}", self.sigma_max)));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return Err(Error::Config(format!("t_eps must be in (0,1), got {}", self.t_eps)));
        }
        Ok(())
    }
}

/// One training draw from the conditional path.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub t: f64,
    pub x_t: Array2<Complex64>,
    pub x1: Array2<Complex64>,
    pub y: Array2<Complex64>,
    pub eps: Array2<Complex64>,
    pub v_target: Array2<Complex64>,
}

/// i.i.d. draws of the time parameter, uniform on `[t_eps, 1)`.
pub fn sample_t<R: Rng + ?Sized>(count: usize, config: &PathConfig, rng: &mut R) -> Vec<f64> {
    assert!(count > 0, "count must be > 0");
    (0..count)
        .map(|_| rng.gen_range(config.t_eps..1.0))
        .collect()
}

/// Standard complex-circular normal draw: independent unit-variance normals
/// on the real and imaginary parts.
pub fn standard_complex_noise<R: Rng + ?Sized>(
    shape: (usize, usize),
    rng: &mut R,
) -> Array2<Complex64> {
    Array2::from_shape_fn(shape, |_| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re, im)
    })
}

/// Draw `x_t` at time `t` for a clean/noisy pair and return it with its
/// velocity regression target.
pub fn sample_path<R: Rng + ?Sized>(
    x1: &Array2<Complex64>,
    y: &Array2<Complex64>,
    t: f64,
    config: &PathConfig,
    rng: &mut R,
) -> Result<PathSample> {
    config.validate()?;
    if x1.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "x1 {:?} vs y {:?}",
            x1.dim(),
            y.dim()
        )));
    }
    if !(config.t_eps..1.0).contains(&t) {
        return Err(Error::InvalidInput(format!(
            "t={t} outside [{}, 1)",
            config.t_eps
        )));
    }
    let eps = standard_complex_noise(x1.dim(), rng);
    Ok(path_sample_with_eps(x1, y, t, config, eps))
}

/// Deterministic variant of [`sample_path`] with the noise supplied by the
/// caller (used by tests and oracle constructions).
pub fn path_sample_with_eps(
    x1: &Array2<Complex64>,
    y: &Array2<Complex64>,
    t: f64,
    config: &PathConfig,
    eps: Array2<Complex64>,
) -> PathSample {
    let s = (1.0 - t) * config.sigma_max;
    let x_t = x1.mapv(|z| z * t) + y.mapv(|z| z * (1.0 - t)) + eps.mapv(|z| z * s);
    let v_target = (x1 - &x_t).mapv(|z| z / (1.0 - t));
    PathSample {
        t,
        x_t,
        x1: x1.clone(),
        y: y.clone(),
        eps,
        v_target,
    }
}

/// Draw from the prior `p0 = N(y, sigma_max^2 I)` that inference starts from.
pub fn sample_prior<R: Rng + ?Sized>(
    y: &Array2<Complex64>,
    config: &PathConfig,
    rng: &mut R,
) -> Array2<Complex64> {
    let eps = standard_complex_noise(y.dim(), rng);
    y + &eps.mapv(|z| z * config.sigma_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> PathConfig {
        PathConfig::default()
    }

    fn one(v: f64) -> Array2<Complex64> {
        arr2(&[[Complex64::new(v, 0.0)]])
    }

    #[test]
    fn sample_t_support_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ts = sample_t(100_000, &cfg(), &mut rng);
        assert!(ts.iter().all(|&t| (0.03..1.0).contains(&t)));
        let mean = ts.iter().sum::<f64>() / ts.len() as f64;
        assert!((mean - 0.515).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn sample_t_reproducible() {
        let a = sample_t(16, &cfg(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_t(16, &cfg(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn path_hand_values() {
        let s = path_sample_with_eps(&one(2.0), &one(0.0), 0.5, &cfg(), one(0.0));
        assert_abs_diff_eq!(s.x_t[(0, 0)].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.v_target[(0, 0)].re, 2.0, epsilon = 1e-12);

        let near_one = path_sample_with_eps(&one(2.0), &one(0.0), 1.0 - 1e-9, &cfg(), one(0.0));
        assert_abs_diff_eq!(near_one.x_t[(0, 0)].re, 2.0, epsilon = 1e-6);

        let at_eps = path_sample_with_eps(&one(1.0), &one(-1.0), 0.03, &cfg(), one(0.0));
        assert_abs_diff_eq!(at_eps.x_t[(0, 0)].re, 0.03 - 0.97, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = Array2::<Complex64>::zeros((2, 3));
        let y = Array2::<Complex64>::zeros((3, 2));
        assert!(sample_path(&x1, &y, 0.5, &cfg(), &mut rng).is_err());
    }

    #[test]
    fn straight_line_and_constant_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x1 = standard_complex_noise((4, 5), &mut rng);
        let y = standard_complex_noise((4, 5), &mut rng);
        let eps = standard_complex_noise((4, 5), &mut rng);
        let c = cfg();
        // v_target equals x1 - y - sigma_max * eps at every t
        let expected = &x1 - &y - &eps.mapv(|z| z * c.sigma_max);
        for &t in &[0.03, 0.2, 0.5, 0.9, 0.999] {
            let s = path_sample_with_eps(&x1, &y, t, &c, eps.clone());
            let err = (&s.v_target - &expected)
                .iter()
                .map(|z| z.norm())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-9, "t={t}: {err}");
        }
        // finite-difference time derivative matches v_target
        let h = 1e-6;
        let t = 0.4;
        let a = path_sample_with_eps(&x1, &y, t - h, &c, eps.clone());
        let b = path_sample_with_eps(&x1, &y, t + h, &c, eps.clone());
        let fd = (&b.x_t - &a.x_t).mapv(|z| z / (2.0 * h));
        let s = path_sample_with_eps(&x1, &y, t, &c, eps.clone());
        let err = (&fd - &s.v_target).iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        assert!(err < 1e-6, "fd mismatch {err}");
    }

    #[test]
    fn prior_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = Array2::from_elem((1, 1), Complex64::new(0.7, -0.2));
        let n = 100_000;
        let mut sum_re = 0.0;
        let mut sum_sq_re = 0.0;
        let mut sum_im = 0.0;
        let mut sum_sq_im = 0.0;
        for _ in 0..n {
            let d = sample_prior(&y, &cfg(), &mut rng)[(0, 0)] - y[(0, 0)];
            sum_re += d.re;
            sum_sq_re += d.re * d.re;
            sum_im += d.im;
            sum_sq_im += d.im * d.im;
        }
        let nf = n as f64;
        let std_re = (sum_sq_re / nf - (sum_re / nf).powi(2)).sqrt();
        let std_im = (sum_sq_im / nf - (sum_im / nf).powi(2)).sqrt();
        assert!((std_re - 0.5).abs() < 0.005, "std re {std_re}");
        assert!((std_im - 0.5).abs() < 0.005, "std im {std_im}");
        // mean within 3 standard errors of 0
        let se = 0.5 / nf.sqrt();
        assert!((sum_re / nf).abs() < 3.0 * se);
        assert!((sum_im / nf).abs() < 3.0 * se);

        // degenerate prior returns y exactly
        let degenerate = PathConfig { sigma_max: 0.0, ..cfg() };
        let out = sample_prior(&y, &degenerate, &mut rng);
        assert_eq!(out[(0, 0)], y[(0, 0)]);
    }
}
