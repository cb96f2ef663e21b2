//! Adam training loop with EMA weights and a checksummed checkpoint format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "SEDD" | version: u8 | header_len: u32 | header: UTF-8 TOML
//! | params: f32 × param_count | ema: f32 × param_count | crc32: u32
//! ```
//!
//! The checksum covers every byte before it. Parameters follow the flat
//! layout of the model backend named in the header.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{CheckpointError, Error, Result};
use crate::likelihood::{corpus_eval, derive_seed};
use crate::losses::{dse_pair_terms, denoising_score_entropy_with_grad, dwdse_with_grad, RateWeights, UniformTime};
use crate::oracle::EnumeratedDist;
use crate::process::Diffusion;
use crate::scores::{AnyModel, ModelDescriptor, TrainableScore};
use crate::{par_map, stream_rng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEDD";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Objective minimized by [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    /// Diffusion-weighted denoising score entropy, one `(t, x_t)` per sequence.
    Dwdse,
    /// Denoising score entropy at one noise level with rate weights.
    DseFixed { sigma_bar: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero at the final step, after warmup.
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm threshold.
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Validation period in steps; 0 disables validation.
    pub eval_every: u64,
    pub eval_mc_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 3e-4,
            warmup_steps: 2000,
            lr_schedule: LrSchedule::Constant,
            grad_clip: 1.0,
            ema_decay: 0.999,
            seed: 0,
            loss: LossKind::Dwdse,
            eval_every: 0,
            eval_mc_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if self.seed > i64::MAX as u64 {
            return bad("seed must fit in a signed 64-bit integer".into());
        }
        if self.eval_every > 0 && self.eval_mc_samples == 0 {
            return bad("eval_mc_samples must be positive when validating".into());
        }
        if let LossKind::DseFixed { sigma_bar } = self.loss {
            if !(sigma_bar > 0.0 && sigma_bar.is_finite()) {
                return bad(format!("fixed sigma_bar must be positive, got {sigma_bar}"));
            }
        }
        Ok(())
    }

    /// Learning rate applied at 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::LinearDecay => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let past = step.saturating_sub(self.warmup_steps) as f64;
                (1.0 - past / span).max(0.0)
            }
        };
        self.lr * warm * decay
    }
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::arg("EMA and parameter vectors differ in length"));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::arg(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
    Ok(())
}

/// Rescales `grad` to norm at most `max_norm`; returns the norm before.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// Adam with `β = (0.9, 0.999)` and `ε = 1e-8`.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t = self.t.saturating_add(1);
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// What [`train`] learns from.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    /// Minibatches of sequences, with an optional held-out slice.
    Corpus {
        train: &'a Corpus,
        valid: Option<&'a Corpus>,
    },
    /// Full-batch exact loss against a known distribution over ordinary
    /// tokens. Requires [`LossKind::DseFixed`].
    Exact(&'a EnumeratedDist),
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Held-out bound of the raw and EMA parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub raw_bound: f64,
    pub ema_bound: f64,
}

/// Serializable ChaCha8 position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(CheckpointError::Header("malformed rng state".into()));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub ema: Vec<f64>,
    pub steps: u64,
    pub rng: RngState,
    pub validation: Vec<ValidationRecord>,
}

impl<M: TrainableScore + Clone> TrainOutcome<M> {
    /// The model with its parameters replaced by the EMA.
    pub fn ema_model(&self) -> M {
        let mut m = self.model.clone();
        m.params_mut().copy_from_slice(&self.ema);
        m
    }
}

fn batch_hash(step: u64, indices: &[usize]) -> u64 {
    let mut h = crc32fast::Hasher::new();
    h.update(&step.to_le_bytes());
    for &i in indices {
        h.update(&(i as u64).to_le_bytes());
    }
    (step << 32) | h.finalize() as u64
}

fn corpus_batch_grad<M: TrainableScore + ?Sized>(
    model: &M,
    diffusion: &Diffusion,
    config: &TrainConfig,
    batch: &[&[usize]],
    step: u64,
) -> Result<(f64, Vec<f64>)> {
    let spec = &diffusion.process;
    let sampler = UniformTime::new(diffusion.t_min)?;
    let parts = par_map(batch.len(), |k| -> Result<(f64, Vec<f64>)> {
        let stream = 1 + step * config.batch_size as u64 + k as u64;
        let mut rng = stream_rng(config.seed, stream);
        let x0 = batch[k];
        match config.loss {
            LossKind::Dwdse => dwdse_with_grad(model, x0, spec, &diffusion.schedule, &sampler, &mut rng),
            LossKind::DseFixed { sigma_bar } => {
                let xt: Vec<usize> = x0
                    .iter()
                    .map(|&a| spec.sample_forward_unchecked(sigma_bar, a, &mut rng))
                    .collect();
                let ev = model.eval(&xt, sigma_bar)?;
                let mut up = vec![0.0; xt.len() * spec.num_states()];
                let v = dse_pair_terms(&ev, x0, &xt, spec, sigma_bar, &RateWeights(*spec), Some((&mut up, 1.0)))?;
                let mut grad = vec![0.0; model.params().len()];
                if v.is_finite() {
                    model.accumulate_grad(&xt, sigma_bar, &up, &mut grad)?;
                }
                Ok((v, grad))
            }
        }
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Runs `config.steps` optimizer steps from `model`, reporting every step to
/// `on_step`. Deterministic given the seed on one build.
pub fn train<M: TrainableScore + Clone>(
    mut model: M,
    diffusion: &Diffusion,
    config: &TrainConfig,
    data: TrainData<'_>,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainOutcome<M>> {
    diffusion.validate().map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    let spec = diffusion.process;
    if model.num_states() != spec.num_states() {
        return Err(Error::Config("model state count does not match the process".into()));
    }
    match data {
        TrainData::Corpus { train, valid } => {
            if train.is_empty() {
                return Err(Error::Config("training corpus is empty".into()));
            }
            for c in std::iter::once(train).chain(valid) {
                if c.num_tokens() != spec.n || c.seq_len() != model.seq_len() {
                    return Err(Error::Config("corpus does not match the model and process".into()));
                }
            }
        }
        TrainData::Exact(p) => {
            if !matches!(config.loss, LossKind::DseFixed { .. }) {
                return Err(Error::Config("exact training needs a fixed noise level".into()));
            }
            if p.num_states() != spec.n || p.seq_len() != model.seq_len() {
                return Err(Error::Config("distribution does not match the model and process".into()));
            }
        }
    }

    let mut rng = stream_rng(config.seed, 0);
    let mut adam = Adam::new(model.params().len());
    let mut ema = model.params().to_vec();
    let mut validation = Vec::new();
    let valid_seed = derive_seed(config.seed, u64::MAX);
    let start = Instant::now();

    for step in 0..config.steps {
        let (loss, mut grad, hash) = match data {
            TrainData::Exact(p) => {
                let LossKind::DseFixed { sigma_bar } = config.loss else {
                    unreachable!("checked above")
                };
                let (l, g) = denoising_score_entropy_with_grad(&model, p, &spec, sigma_bar, &RateWeights(spec))?;
                (l, g, batch_hash(step, &[]))
            }
            TrainData::Corpus { train, .. } => {
                let idx: Vec<usize> = (0..config.batch_size)
                    .map(|_| rng.random_range(0..train.len()))
                    .collect();
                let batch: Vec<&[usize]> = idx.iter().map(|&i| train.sequences()[i].as_slice()).collect();
                let (l, g) = corpus_batch_grad(&model, diffusion, config, &batch, step)?;
                (l, g, batch_hash(step, &idx))
            }
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalAbort {
                step: step + 1,
                batch_hash: hash,
            });
        }
        let grad_norm = clip_grad_norm(&mut grad, config.grad_clip);
        let lr = config.lr_at(step);
        adam.step(model.params_mut(), &grad, lr);
        ema_update(&mut ema, model.params(), config.ema_decay)?;
        on_step(&StepMetrics {
            step: step + 1,
            loss,
            grad_norm,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });

        if let TrainData::Corpus { valid: Some(valid), .. } = data {
            let done = step + 1;
            if config.eval_every > 0 && (done % config.eval_every == 0 || done == config.steps) {
                let raw = corpus_eval(&model, valid, diffusion, config.eval_mc_samples, valid_seed)?;
                let mut ema_model = model.clone();
                ema_model.params_mut().copy_from_slice(&ema);
                let avg = corpus_eval(&ema_model, valid, diffusion, config.eval_mc_samples, valid_seed)?;
                validation.push(ValidationRecord {
                    step: done,
                    raw_bound: raw.nll_bound,
                    ema_bound: avg.nll_bound,
                });
            }
        }
    }

    Ok(TrainOutcome {
        model,
        ema,
        steps: config.steps,
        rng: RngState::capture(&rng),
        validation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    diffusion: Diffusion,
    model: ModelDescriptor,
    train: TrainConfig,
    step: u64,
    rng: RngState,
    param_count: usize,
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub diffusion: Diffusion,
    pub model: ModelDescriptor,
    pub train: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<f32>,
    pub ema: Vec<f32>,
}

impl Checkpoint {
    pub fn from_outcome<M: TrainableScore>(outcome: &TrainOutcome<M>, diffusion: &Diffusion, train: &TrainConfig) -> Self {
        Self {
            diffusion: *diffusion,
            model: outcome.model.descriptor(),
            train: *train,
            step: outcome.steps,
            rng: outcome.rng.clone(),
            params: outcome.model.params().iter().map(|&p| p as f32).collect(),
            ema: outcome.ema.iter().map(|&p| p as f32).collect(),
        }
    }

    /// Model with the raw parameters.
    pub fn raw_model(&self) -> Result<AnyModel> {
        self.model.with_params(self.params.iter().map(|&p| p as f64).collect())
    }

    /// Model with the EMA parameters, used for evaluation and sampling.
    pub fn ema_model(&self) -> Result<AnyModel> {
        self.model.with_params(self.ema.iter().map(|&p| p as f64).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.params.len() != self.ema.len() {
            return Err(Error::arg("raw and EMA parameter counts differ"));
        }
        let header = Header {
            diffusion: self.diffusion,
            model: self.model.clone(),
            train: self.train,
            step: self.step,
            rng: self.rng.clone(),
            param_count: self.params.len(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::arg(format!("header: {e}")))?;
        let mut out = Vec::with_capacity(13 + text.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for v in self.params.iter().chain(&self.ema) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 5 {
            return Err(CheckpointError::Truncated);
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: bytes[4],
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 13 {
            return Err(CheckpointError::Truncated);
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body_start = 9 + header_len;
        if bytes.len() < body_start + 4 {
            return Err(CheckpointError::Truncated);
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
        let checksum_err = CheckpointError::Checksum { stored, computed };
        let header: Header = match std::str::from_utf8(&bytes[9..body_start])
            .map_err(|e| e.to_string())
            .and_then(|s| toml::from_str(s).map_err(|e| e.to_string()))
        {
            Ok(h) => h,
            Err(_) if stored != computed => return Err(checksum_err),
            Err(e) => return Err(CheckpointError::Header(e)),
        };
        let count = header.param_count;
        let expected = count
            .checked_mul(8)
            .and_then(|v| v.checked_add(body_start + 4))
            .ok_or(CheckpointError::Truncated)?;
        if bytes.len() != expected {
            return Err(CheckpointError::Truncated);
        }
        if stored != computed {
            return Err(checksum_err);
        }
        let floats: Vec<f32> = bytes[body_start..bytes.len() - 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (params, ema) = floats.split_at(count);
        Ok(Self {
            diffusion: header.diffusion,
            model: header.model,
            train: header.train,
            step: header.step,
            rng: header.rng,
            params: params.to_vec(),
            ema: ema.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes)?;
        if ckpt.model.param_count()? != ckpt.params.len() {
            return Err(CheckpointError::Header("parameter count does not match the model".into()).into());
        }
        Ok(ckpt)
    }
}
