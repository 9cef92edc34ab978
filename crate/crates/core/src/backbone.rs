//! Network contract `F(x_t, y, t)` and a small trainable reference net.
//!
//! Anything satisfying [`Backbone`] can be sampled from; training requires
//! [`DiffBackbone`], whose forward pass is recorded on a [`Tape`]. The
//! built-in [`RefNet`] is a compact convolutional encoder-decoder over the
//! stacked real/imaginary channels of `(x_t, y)` — 4 channels in, 2 out —
//! with a sinusoidal time embedding projected into a per-channel bias at
//! every stage. It is sized for desk-scale runs and overfitting small
//! corpora; a full NCSN++ can be plugged in through the same traits.

use std::sync::Arc;

use ndarray::{Array1, ArrayD, IxDyn};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::objectives::{edm_scalings, v_from_x1, ObjectiveKind, PrecondConfig};
use crate::path::PathConfig;
use crate::spectral::SpectralConfig;
use crate::tensor;

type Spec = ndarray::Array2<Complex64>;

/// Deterministic network forward pass. The output shape always equals the
/// `x` input shape. Batches with per-sample `t` are handled by calling this
/// once per sample.
pub trait Backbone: Send + Sync {
    fn apply(&self, x: &Spec, y: &Spec, t: f64) -> Spec;
    fn parameter_count(&self) -> usize;
}

/// A backbone whose forward pass can be recorded for backpropagation.
pub trait DiffBackbone: Backbone {
    fn params(&self) -> &[ArrayD<f64>];
    fn param_names(&self) -> Vec<String>;
    fn set_params(&mut self, params: Vec<ArrayD<f64>>) -> Result<()>;

    /// Record the forward pass; `params` must be leaves registered from
    /// [`DiffBackbone::params`] in order, `x` and `y` are `(2, F, T)` nodes.
    fn forward_graph(&self, tape: &mut Tape, params: &[Var], x: Var, y: Var, t: f64) -> Var;
}

/// Sinusoidal time embedding with geometrically spaced frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding dim must be even and >= 2, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    /// Features `[sin(w_i t), cos(w_i t)]` with `w_i` geometric in [1, 1000].
    pub fn embed(&self, t: f64) -> Array1<f64> {
        let half = self.dim / 2;
        let mut out = Array1::zeros(self.dim);
        for i in 0..half {
            let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            let w = 1000f64.powf(exponent);
            out[2 * i] = (w * t).sin();
            out[2 * i + 1] = (w * t).cos();
        }
        out
    }
}

/// Shape of the reference network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefNetConfig {
    pub channels: usize,
    pub depth: usize,
    pub emb_dim: usize,
}

impl Default for RefNetConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            depth: 2,
            emb_dim: 16,
        }
    }
}

/// The reference convolutional encoder-decoder.
///
/// stem conv (4 -> C) -> pool F/2 -> `depth` residual conv blocks ->
/// upsample -> skip add -> fuse conv -> 1x1 head (C -> 2), every stage
/// biased by a projection of the time embedding. The head weights start at
/// zero so the initial prediction is identically zero.
#[derive(Clone)]
pub struct RefNet {
    cfg: RefNetConfig,
    emb: TimeEmbedding,
    params: Vec<ArrayD<f64>>,
    names: Vec<String>,
}

/// Build the reference network with seeded Gaussian init.
pub fn reference_net(channels: usize, depth: usize, seed: u64) -> Result<RefNet> {
    RefNet::new(
        RefNetConfig {
            channels,
            depth,
            ..RefNetConfig::default()
        },
        seed,
    )
}

impl RefNet {
    pub fn new(cfg: RefNetConfig, seed: u64) -> Result<Self> {
        if cfg.channels < 4 {
            return Err(Error::Config(format!(
                "reference net needs channels >= 4, got {}",
                cfg.channels
            )));
        }
        if cfg.depth < 1 {
            return Err(Error::Config(format!(
                "reference net needs depth >= 1, got {}",
                cfg.depth
            )));
        }
        let emb = TimeEmbedding::new(cfg.emb_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let e = cfg.emb_dim;

        let mut params = Vec::new();
        let mut names = Vec::new();
        let push = |name: String, t: ArrayD<f64>, params: &mut Vec<ArrayD<f64>>, names: &mut Vec<String>| {
            names.push(name);
            params.push(t);
        };

        let stage = |prefix: &str,
                         c_in: usize,
                         k: usize,
                         rng: &mut ChaCha8Rng,
                         params: &mut Vec<ArrayD<f64>>,
                         names: &mut Vec<String>| {
            let fan_in = (c_in * k * k) as f64;
            let std = (2.0 / fan_in).sqrt();
            push(
                format!("{prefix}.w"),
                gaussian(&[c, c_in, k, k], std, rng),
                params,
                names,
            );
            push(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[c])), params, names);
            push(
                format!("{prefix}.tw"),
                gaussian(&[c, e], 0.05, rng),
                params,
                names,
            );
            push(format!("{prefix}.tb"), ArrayD::zeros(IxDyn(&[c])), params, names);
        };

        stage("stem", 4, 3, &mut rng, &mut params, &mut names);
        for d in 0..cfg.depth {
            stage(&format!("block{d}"), c, 3, &mut rng, &mut params, &mut names);
        }
        stage("fuse", c, 3, &mut rng, &mut params, &mut names);
        push("head.w".into(), ArrayD::zeros(IxDyn(&[2, c, 1, 1])), &mut params, &mut names);
        push("head.b".into(), ArrayD::zeros(IxDyn(&[2])), &mut params, &mut names);

        Ok(Self { cfg, emb, params, names })
    }

    pub fn config(&self) -> &RefNetConfig {
        &self.cfg
    }

    /// conv + bias + projected time bias + silu, as one stage.
    fn stage_graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        base: usize,
        x: Var,
        emb: &Arc<Array1<f64>>,
    ) -> Var {
        let conv = tape.conv2d(x, params[base]);
        let biased = tape.channel_bias(conv, params[base + 1]);
        let t_proj = tape.mat_vec(params[base + 2], emb.clone());
        let t_bias = tape.add(t_proj, params[base + 3]);
        let conditioned = tape.channel_bias(biased, t_bias);
        tape.silu(conditioned)
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl Backbone for RefNet {
    fn apply(&self, x: &Spec, y: &Spec, t: f64) -> Spec {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let xv = tape.constant(tensor::complex_to_dyn(x));
        let yv = tape.constant(tensor::complex_to_dyn(y));
        let out = self.forward_graph(&mut tape, &params, xv, yv, t);
        tensor::dyn_to_complex(tape.value(out))
    }

    fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

impl DiffBackbone for RefNet {
    fn params(&self) -> &[ArrayD<f64>] {
        &self.params
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn set_params(&mut self, params: Vec<ArrayD<f64>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (cur, new) in self.params.iter().zip(&params) {
            if cur.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    cur.shape(),
                    new.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    fn forward_graph(&self, tape: &mut Tape, params: &[Var], x: Var, y: Var, t: f64) -> Var {
        let emb = Arc::new(self.emb.embed(t));
        let f_bins = tape.value(x).shape()[1];
        let inp = tape.concat_channels(x, y);

        let stem = self.stage_graph(tape, params, 0, inp, &emb);

        // pool needs an even frequency axis
        let f_even = f_bins + f_bins % 2;
        let pooled_in = if f_even != f_bins { tape.pad_freq(stem, f_even) } else { stem };
        let mut h = tape.avg_pool_freq2(pooled_in);
        for d in 0..self.cfg.depth {
            let base = 4 * (1 + d);
            let block = self.stage_graph(tape, params, base, h, &emb);
            h = tape.add(h, block);
        }
        let up = tape.upsample_freq2(h);
        let up = if f_even != f_bins { tape.crop_freq(up, f_bins) } else { up };

        let skip = tape.add(up, stem);
        let fuse_base = 4 * (1 + self.cfg.depth);
        let fused = self.stage_graph(tape, params, fuse_base, skip, &emb);

        let head_base = fuse_base + 4;
        let out = tape.conv2d(fused, params[head_base]);
        tape.channel_bias(out, params[head_base + 1])
    }
}

/// Both prediction views of a wrapped network at `(x_t, y, t)`.
pub struct ObjectiveHead<'a> {
    net: &'a dyn Backbone,
    kind: ObjectiveKind,
    precond: PrecondConfig,
}

/// Wrap a trained backbone so callers can query either the velocity-space or
/// the x1-space prediction, whichever the sampler or a loss needs.
pub fn wrap_objective_head<'a>(
    net: &'a dyn Backbone,
    kind: ObjectiveKind,
    precond: &PrecondConfig,
) -> ObjectiveHead<'a> {
    ObjectiveHead {
        net,
        kind,
        precond: *precond,
    }
}

impl ObjectiveHead<'_> {
    /// x1-space prediction.
    pub fn x1(&self, x_t: &Spec, y: &Spec, t: f64) -> Spec {
        match self.kind {
            ObjectiveKind::Velocity => {
                let v = self.net.apply(x_t, y, t);
                crate::objectives::x1_from_v(&v, x_t, t)
            }
            ObjectiveKind::X1 => self.net.apply(x_t, y, t),
            ObjectiveKind::X1Edm => {
                let (c_skip, c_out, c_in) = edm_scalings(t, &self.precond);
                let inner = self
                    .net
                    .apply(&x_t.mapv(|z| z * c_in), &y.mapv(|z| z * c_in), t);
                x_t.mapv(|z| z * c_skip) + inner.mapv(|z| z * c_out)
            }
        }
    }

    /// Velocity-space prediction; singular at `t >= 1` for x1-derived kinds.
    pub fn velocity(&self, x_t: &Spec, y: &Spec, t: f64) -> Result<Spec> {
        match self.kind {
            ObjectiveKind::Velocity => Ok(self.net.apply(x_t, y, t)),
            ObjectiveKind::X1 | ObjectiveKind::X1Edm => {
                let x1 = self.x1(x_t, y, t);
                v_from_x1(&x1, x_t, t)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "fmse-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_array(name: &str, a: &ArrayD<f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", self.name)))
    }
}

/// Serialized Adam moments, for exact training resumption.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

/// Single-file checkpoint with everything needed to resume or sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub objective: ObjectiveKind,
    pub precond: PrecondConfig,
    pub path: PathConfig,
    pub spectral: SpectralConfig,
    pub backbone: RefNetConfig,
    pub params: Vec<NamedTensor>,
    pub ema_params: Vec<NamedTensor>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    /// Serialized training RNG, present on resumable checkpoints.
    #[serde(default)]
    pub rng: Option<String>,
    #[serde(default)]
    pub history: Vec<(u64, f64)>,
    #[serde(default)]
    pub best_val: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("parse: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format '{}' (expected '{CHECKPOINT_FORMAT}')",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    /// Instantiate the stored backbone with the EMA weights (the weights
    /// used at inference).
    pub fn ema_net(&self) -> Result<RefNet> {
        let mut net = RefNet::new(self.backbone, 0)?;
        let tensors: Result<Vec<ArrayD<f64>>> =
            self.ema_params.iter().map(|t| t.to_array()).collect();
        net.set_params(tensors?)?;
        Ok(net)
    }

    /// Instantiate the stored backbone with the raw (non-EMA) weights.
    pub fn raw_net(&self) -> Result<RefNet> {
        let mut net = RefNet::new(self.backbone, 0)?;
        let tensors: Result<Vec<ArrayD<f64>>> = self.params.iter().map(|t| t.to_array()).collect();
        net.set_params(tensors?)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::standard_complex_noise;
    use rand::SeedableRng;

    #[test]
    fn embedding_validation_and_shape() {
        assert!(TimeEmbedding::new(0).is_err());
        assert!(TimeEmbedding::new(3).is_err());
        let e = TimeEmbedding::new(8).unwrap();
        let v = e.embed(0.5);
        assert_eq!(v.len(), 8);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn refnet_validates_sizes() {
        assert!(reference_net(2, 1, 0).is_err());
        assert!(reference_net(8, 0, 0).is_err());
        assert!(reference_net(8, 1, 0).is_ok());
    }

    #[test]
    fn refnet_shape_and_determinism() {
        let net = reference_net(8, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for shape in [(12, 7), (9, 4), (256, 3)] {
            let x = standard_complex_noise(shape, &mut rng);
            let y = standard_complex_noise(shape, &mut rng);
            let a = net.apply(&x, &y, 0.4);
            let b = net.apply(&x, &y, 0.4);
            assert_eq!(a.dim(), shape);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn refnet_zero_head_initial_output() {
        let net = reference_net(8, 1, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = standard_complex_noise((10, 5), &mut rng);
        let y = standard_complex_noise((10, 5), &mut rng);
        let out = net.apply(&x, &y, 0.2);
        assert!(out.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn objective_head_views_consistent() {
        let net = {
            let mut n = reference_net(8, 1, 11).unwrap();
            // make the net non-trivial by perturbing the head weights
            let mut ps = n.params().to_vec();
            let last = ps.len() - 2;
            ps[last] = ps[last].mapv(|_| 0.3);
            n.set_params(ps).unwrap();
            n
        };
        let precond = PrecondConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x_t = standard_complex_noise((8, 6), &mut rng);
        let y = standard_complex_noise((8, 6), &mut rng);
        for kind in ObjectiveKind::ALL {
            let head = wrap_objective_head(&net, kind, &precond);
            for &t in &[0.1, 0.5, 0.9] {
                let x1v = head.x1(&x_t, &y, t);
                let vv = head.velocity(&x_t, &y, t).unwrap();
                let recon = &x_t + &vv.mapv(|z| z * (1.0 - t));
                let err = (&x1v - &recon).iter().map(|z| z.norm()).fold(0.0f64, f64::max);
                assert!(err < 1e-6, "{kind} t={t}: {err}");
            }
        }
        // velocity view of an x1 head is singular at t = 1
        let head = wrap_objective_head(&net, ObjectiveKind::X1, &precond);
        assert!(head.velocity(&x_t, &y, 1.0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = reference_net(8, 1, 17).unwrap();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            step: 42,
            objective: ObjectiveKind::X1Edm,
            precond: PrecondConfig::default(),
            path: PathConfig::default(),
            spectral: SpectralConfig::default(),
            backbone: *net.config(),
            params: net
                .param_names()
                .iter()
                .zip(net.params())
                .map(|(n, p)| NamedTensor::from_array(n, p))
                .collect(),
            ema_params: net
                .param_names()
                .iter()
                .zip(net.params())
                .map(|(n, p)| NamedTensor::from_array(n, p))
                .collect(),
            optimizer: None,
            rng: None,
            history: vec![(10, 1.0), (20, 2.0)],
            best_val: Some(2.0),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.objective, ObjectiveKind::X1Edm);
        assert_eq!(loaded.history, ckpt.history);
        let net2 = loaded.ema_net().unwrap();
        assert_eq!(net2.params(), net.params());

        // format tag is enforced
        let mut bad = ckpt.clone();
        bad.format = "other".into();
        bad.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
