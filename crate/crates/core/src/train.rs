//! Training loop: Adam on the combined objective with EMA weight tracking,
//! periodic validation, JSONL logging, and resumable checkpoints.
//!
//! One time draw per utterance in a batch, per-sample loss graphs evaluated
//! in parallel with the gradient reduction done in fixed batch order, so a
//! seeded run is bit-reproducible. Checkpoints carry optimizer moments and
//! the serialized RNG states; resuming from one continues the exact
//! trajectory of an uninterrupted run.

use std::io::Write;
use std::path::PathBuf;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::aux::{si_sdr_loss, LogSpectralSurrogate, PerceptualLoss};
use crate::backbone::{
    Checkpoint, DiffBackbone, NamedTensor, OptimizerState, RefNet, CHECKPOINT_FORMAT,
};
use crate::data::TrainData;
use crate::error::{Error, Result};
use crate::eval::{utterance_seed, MetricEvaluator};
use crate::objectives::{combined_sample_loss_graph, ObjectiveKind, PrecondConfig};
use crate::path::{sample_path, sample_t, PathConfig, PathSample};
use crate::sampler::{enhance, SamplerConfig};
use crate::spectral::{istft, stft, SpectralConfig};

/// Optimization hyperparameters.
///
/// `learning_rate = 0` is accepted and freezes the parameters, which is
/// useful for plumbing tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub max_steps: u64,
    pub val_interval: u64,
    pub alpha_p: f64,
    pub alpha_s: f64,
    pub objective: ObjectiveKind,
    pub seed: u64,
    /// Random training crops, in STFT frames.
    pub crop_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            ema_decay: 0.999,
            max_steps: 1000,
            val_interval: 100,
            alpha_p: 0.0,
            alpha_s: 0.0,
            objective: ObjectiveKind::X1Edm,
            seed: 0,
            crop_frames: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "ema_decay must be in (0,1), got {}",
                self.ema_decay
            )));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.val_interval == 0 {
            return Err(Error::Config(
                "batch_size, max_steps, and val_interval must be >= 1".into(),
            ));
        }
        if !(self.alpha_p >= 0.0 && self.alpha_p.is_finite() && self.alpha_s >= 0.0 && self.alpha_s.is_finite()) {
            return Err(Error::Config("alpha weights must be finite and >= 0".into()));
        }
        if self.crop_frames == 0 {
            return Err(Error::Config("crop_frames must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam with the conventional (0.9, 0.999, 1e-8) moment defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[ArrayD<f64>]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let b1k = 1.0 - self.beta1.powi(self.step as i32);
        let b2k = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / b1k;
                    let v_hat = *v / b2k;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                });
        }
    }

    pub fn to_state(&self, names: &[String]) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: names
                .iter()
                .zip(&self.m)
                .map(|(n, t)| NamedTensor::from_array(n, t))
                .collect(),
            v: names
                .iter()
                .zip(&self.v)
                .map(|(n, t)| NamedTensor::from_array(n, t))
                .collect(),
        }
    }

    pub fn from_state(learning_rate: f64, state: &OptimizerState) -> Result<Self> {
        let m: Result<Vec<_>> = state.m.iter().map(|t| t.to_array()).collect();
        let v: Result<Vec<_>> = state.v.iter().map(|t| t.to_array()).collect();
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: state.step,
            m: m?,
            v: v?,
        })
    }
}

/// Exponential moving average of parameter tensors:
/// `shadow = decay * shadow + (1 - decay) * params` after every step.
#[derive(Debug, Clone)]
pub struct Ema {
    decay: f64,
    shadow: Vec<ArrayD<f64>>,
}

impl Ema {
    pub fn new(params: &[ArrayD<f64>], decay: f64) -> Self {
        Self {
            decay,
            shadow: params.to_vec(),
        }
    }

    pub fn from_shadow(shadow: Vec<ArrayD<f64>>, decay: f64) -> Self {
        Self { decay, shadow }
    }

    pub fn update(&mut self, params: &[ArrayD<f64>]) {
        for (s, p) in self.shadow.iter_mut().zip(params) {
            ndarray::Zip::from(s).and(p).for_each(|s, &p| {
                *s = self.decay * *s + (1.0 - self.decay) * p;
            });
        }
    }

    pub fn shadow(&self) -> &[ArrayD<f64>] {
        &self.shadow
    }
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub params: Vec<ArrayD<f64>>,
    pub ema_params: Vec<ArrayD<f64>>,
    /// Serialized RNG pair, as stored in checkpoints.
    pub rng_state: String,
    pub best_val: Option<f64>,
    /// `(step, validation metric)` pairs, metric higher-is-better.
    pub history: Vec<(u64, f64)>,
}

/// First step whose recorded metric reaches `threshold` (inclusive).
pub fn steps_to_threshold(history: &[(u64, f64)], threshold: f64) -> Result<Option<u64>> {
    if history.is_empty() {
        return Err(Error::InvalidInput("empty validation history".into()));
    }
    Ok(history
        .iter()
        .find(|(_, metric)| *metric >= threshold)
        .map(|(step, _)| *step))
}

/// Everything train needs besides the data and the network.
pub struct TrainSetup<'a> {
    pub config: TrainConfig,
    pub path: PathConfig,
    pub precond: PrecondConfig,
    pub spectral: SpectralConfig,
    pub sampler: SamplerConfig,
    /// Perceptual loss used when `alpha_p > 0`; defaults to the built-in
    /// surrogate.
    pub perceptual: Option<&'a dyn PerceptualLoss>,
    /// Validation metric; defaults to built-in SI-SDR of enhanced audio.
    pub val_metric: Option<&'a dyn MetricEvaluator>,
    /// Where checkpoints and the JSONL log go; nothing is written when None.
    pub out_dir: Option<PathBuf>,
}

impl<'a> TrainSetup<'a> {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            path: PathConfig::default(),
            precond: PrecondConfig::default(),
            spectral: SpectralConfig::default(),
            sampler: SamplerConfig::default(),
            perceptual: None,
            val_metric: None,
            out_dir: None,
        }
    }
}

/// One training-step record in the JSONL log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub cfm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pesq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sisdr: Option<f64>,
    pub wall_ms: u64,
}

/// One validation record in the JSONL log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValLog {
    pub step: u64,
    pub val_metric: f64,
    pub metric: String,
}

#[derive(Serialize, Deserialize)]
struct RngPair {
    data: ChaCha8Rng,
    path: ChaCha8Rng,
}

struct LoopState {
    start_step: u64,
    adam: Adam,
    ema: Ema,
    data_rng: ChaCha8Rng,
    path_rng: ChaCha8Rng,
    history: Vec<(u64, f64)>,
    best_val: Option<f64>,
}

/// Train the reference net from scratch.
pub fn train(setup: &TrainSetup, data: &TrainData, net: &mut RefNet) -> Result<TrainState> {
    setup.config.validate()?;
    let params = net.params().to_vec();
    let state = LoopState {
        start_step: 0,
        adam: Adam::new(setup.config.learning_rate, &params),
        ema: Ema::new(&params, setup.config.ema_decay),
        data_rng: ChaCha8Rng::seed_from_u64(setup.config.seed ^ 0xD47A_5EED),
        path_rng: ChaCha8Rng::seed_from_u64(setup.config.seed ^ 0x9E37_79B9),
        history: Vec::new(),
        best_val: None,
    };
    run_loop(setup, data, net, params, state)
}

/// Continue training from a checkpoint produced by [`train`]. The
/// configuration must match the one the checkpoint was written under for the
/// continuation to reproduce an uninterrupted run.
pub fn resume(setup: &TrainSetup, data: &TrainData, ckpt: &Checkpoint) -> Result<(RefNet, TrainState)> {
    setup.config.validate()?;
    let mut net = ckpt.raw_net()?;
    let params: Vec<ArrayD<f64>> = net.params().to_vec();
    let ema_params: Result<Vec<ArrayD<f64>>> = ckpt.ema_params.iter().map(|t| t.to_array()).collect();
    let opt_state = ckpt
        .optimizer
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state; cannot resume".into()))?;
    let rng_json = ckpt
        .rng
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no RNG state; cannot resume".into()))?;
    let rngs: RngPair = serde_json::from_str(rng_json)
        .map_err(|e| Error::Checkpoint(format!("rng state parse: {e}")))?;
    let state = LoopState {
        start_step: ckpt.step,
        adam: Adam::from_state(setup.config.learning_rate, opt_state)?,
        ema: Ema::from_shadow(ema_params?, setup.config.ema_decay),
        data_rng: rngs.data,
        path_rng: rngs.path,
        history: ckpt.history.clone(),
        best_val: ckpt.best_val,
    };
    let out = run_loop(setup, data, &mut net, params, state)?;
    Ok((net, out))
}

fn run_loop(
    setup: &TrainSetup,
    data: &TrainData,
    net: &mut RefNet,
    mut params: Vec<ArrayD<f64>>,
    mut st: LoopState,
) -> Result<TrainState> {
    let cfg = &setup.config;
    if data.train.is_empty() {
        return Err(Error::InvalidInput("training data is empty".into()));
    }
    let default_surrogate = LogSpectralSurrogate::default();
    let perceptual: &dyn PerceptualLoss = setup.perceptual.unwrap_or(&default_surrogate);

    let mut log_file = match &setup.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let path = dir.join("train_log.jsonl");
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::Io { path, source: e })?,
            )
        }
        None => None,
    };
    let started = std::time::Instant::now();

    for step in st.start_step + 1..=cfg.max_steps {
        // assemble the batch: one utterance crop and one t per element
        let mut batch: Vec<PathSample> = Vec::with_capacity(cfg.batch_size);
        let mut t_values = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = st.data_rng.gen_range(0..data.train.len());
            let pair = &data.train[idx];
            let total_frames = pair.clean.n_frames();
            let (clean, noisy) = if total_frames > cfg.crop_frames {
                let start = st.data_rng.gen_range(0..=total_frames - cfg.crop_frames);
                (
                    pair.clean
                        .data
                        .slice(ndarray::s![.., start..start + cfg.crop_frames])
                        .to_owned(),
                    pair.noisy
                        .data
                        .slice(ndarray::s![.., start..start + cfg.crop_frames])
                        .to_owned(),
                )
            } else {
                (pair.clean.data.clone(), pair.noisy.data.clone())
            };
            let t = sample_t(1, &setup.path, &mut st.path_rng)[0];
            t_values.push(t);
            batch.push(sample_path(&clean, &noisy, t, &setup.path, &mut st.path_rng)?);
        }

        // per-sample graphs in parallel; reduce in batch order
        let results: Vec<Result<(f64, f64, Option<f64>, Option<f64>, Vec<ArrayD<f64>>)>> = batch
            .par_iter()
            .map(|sample| {
                let mut tape = Tape::new();
                let param_vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
                let terms = combined_sample_loss_graph(
                    &mut tape,
                    cfg.objective,
                    net,
                    &param_vars,
                    sample,
                    &setup.precond,
                    cfg.alpha_p,
                    cfg.alpha_s,
                    Some(perceptual),
                    &setup.spectral,
                )?;
                let grads = tape.backward(terms.total);
                let g: Vec<ArrayD<f64>> = param_vars
                    .iter()
                    .zip(&params)
                    .map(|(v, p)| {
                        grads
                            .get(*v)
                            .cloned()
                            .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
                    })
                    .collect();
                Ok((
                    tape.scalar_value(terms.total),
                    tape.scalar_value(terms.cfm),
                    terms.pesq.map(|v| tape.scalar_value(v)),
                    terms.sisdr.map(|v| tape.scalar_value(v)),
                    g,
                ))
            })
            .collect();

        let mut loss = 0.0;
        let mut cfm = 0.0;
        let mut pesq_acc: Option<f64> = None;
        let mut sisdr_acc: Option<f64> = None;
        let mut grads: Vec<ArrayD<f64>> =
            params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        for r in results {
            let (l, c, p, s, g) = r?;
            loss += l;
            cfm += c;
            if let Some(p) = p {
                *pesq_acc.get_or_insert(0.0) += p;
            }
            if let Some(s) = s {
                *sisdr_acc.get_or_insert(0.0) += s;
            }
            for (acc, gi) in grads.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        let n = cfg.batch_size as f64;
        loss /= n;
        cfm /= n;
        let pesq = pesq_acc.map(|v| v / n);
        let sisdr = sisdr_acc.map(|v| v / n);
        for g in &mut grads {
            g.mapv_inplace(|x| x / n);
        }

        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                t_values,
                components: format!("loss={loss} cfm={cfm} pesq={pesq:?} sisdr={sisdr:?}"),
            });
        }

        st.adam.update(&mut params, &grads);
        st.ema.update(&params);

        if let Some(f) = log_file.as_mut() {
            let record = StepLog {
                step,
                loss,
                cfm,
                pesq,
                sisdr,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            writeln!(f, "{}", serde_json::to_string(&record).unwrap()).map_err(|e| Error::Io {
                path: setup.out_dir.clone().unwrap(),
                source: e,
            })?;
        }

        if step % cfg.val_interval == 0 || step == cfg.max_steps {
            net.set_params(params.clone())?;
            let metric_name = setup.val_metric.map(|m| m.name().to_string());
            let val = validate(setup, data, net, st.ema.shadow())?;
            if let Some(v) = val {
                st.history.push((step, v));
                let improved = st.best_val.map_or(true, |b| v > b);
                if improved {
                    st.best_val = Some(v);
                }
                if let Some(f) = log_file.as_mut() {
                    let record = ValLog {
                        step,
                        val_metric: v,
                        metric: metric_name.unwrap_or_else(|| "si_sdr".into()),
                    };
                    writeln!(f, "{}", serde_json::to_string(&record).unwrap()).map_err(|e| {
                        Error::Io {
                            path: setup.out_dir.clone().unwrap(),
                            source: e,
                        }
                    })?;
                }
                if let Some(dir) = &setup.out_dir {
                    let ckpt = build_checkpoint(setup, net, &params, &st, step)?;
                    ckpt.save(&dir.join("last.ckpt.json"))?;
                    if improved {
                        ckpt.save(&dir.join("best.ckpt.json"))?;
                    }
                }
            }
        }
    }

    net.set_params(params.clone())?;
    let rng_state = serde_json::to_string(&RngPair {
        data: st.data_rng.clone(),
        path: st.path_rng.clone(),
    })
    .unwrap();
    if let Some(dir) = &setup.out_dir {
        let ckpt = build_checkpoint(setup, net, &params, &st, cfg.max_steps)?;
        ckpt.save(&dir.join("last.ckpt.json"))?;
    }
    Ok(TrainState {
        step: cfg.max_steps,
        params,
        ema_params: st.ema.shadow().to_vec(),
        rng_state,
        best_val: st.best_val,
        history: st.history,
    })
}

fn build_checkpoint(
    setup: &TrainSetup,
    net: &RefNet,
    params: &[ArrayD<f64>],
    st: &LoopState,
    step: u64,
) -> Result<Checkpoint> {
    let names = net.param_names();
    let rng = serde_json::to_string(&RngPair {
        data: st.data_rng.clone(),
        path: st.path_rng.clone(),
    })
    .unwrap();
    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        step,
        objective: setup.config.objective,
        precond: setup.precond,
        path: setup.path,
        spectral: setup.spectral,
        backbone: *net.config(),
        params: names
            .iter()
            .zip(params)
            .map(|(n, p)| NamedTensor::from_array(n, p))
            .collect(),
        ema_params: names
            .iter()
            .zip(st.ema.shadow())
            .map(|(n, p)| NamedTensor::from_array(n, p))
            .collect(),
        optimizer: Some(st.adam.to_state(&names)),
        rng: Some(rng),
        history: st.history.clone(),
        best_val: st.best_val,
    })
}

/// Mean validation metric of EMA-weight enhancement over the val split;
/// `None` when there is no validation data.
fn validate(
    setup: &TrainSetup,
    data: &TrainData,
    net: &RefNet,
    ema_params: &[ArrayD<f64>],
) -> Result<Option<f64>> {
    if data.val.is_empty() {
        return Ok(None);
    }
    let mut ema_net = net.clone();
    ema_net.set_params(ema_params.to_vec())?;
    let scores: Vec<Result<f64>> = data
        .val
        .par_iter()
        .map(|utt| {
            let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(setup.config.seed, &utt.id));
            let y_spec = stft(&utt.noisy, &setup.spectral)?;
            let enhanced_spec = enhance(
                &ema_net,
                setup.config.objective,
                &y_spec,
                &setup.path,
                &setup.precond,
                &setup.sampler,
                &mut rng,
            )?;
            let est = istft(&enhanced_spec)?;
            match setup.val_metric {
                Some(metric) => metric.score(&est, &utt.clean),
                None => Ok(-si_sdr_loss(&est, &utt.clean)?),
            }
        })
        .collect();
    let mut total = 0.0;
    for s in &scores {
        match s {
            Ok(v) => total += v,
            Err(e) => return Err(Error::Evaluator {
                name: "validation".into(),
                detail: e.to_string(),
            }),
        }
    }
    Ok(Some(total / data.val.len() as f64))
}
