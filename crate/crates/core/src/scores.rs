//! Concrete-score models `s_θ(x, σ̄)`.
//!
//! Models output log-ratios; scores are their exponentials. An evaluation
//! is a `d × n_states` table; the entry for a position's own token is
//! always log 1 = 0.
//!
//! Under the absorbing process an unmasked position has no outgoing reverse
//! rate at all (`Q(x_i, y) = 0` for every `y ≠ x_i`), so its entries carry no
//! information. They are flagged as excluded rather than stored as `-∞`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::TransitionSpec;

/// Floor applied to log-scores whose ratio is exactly zero.
pub const MIN_LOG_SCORE: f64 = -700.0;

/// Largest sequence space a [`TabularScore`] may cover.
pub const MAX_TABULAR_SEQUENCES: usize = 1 << 16;

/// Shape of a score table plus which entries are structurally excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreLayout {
    pub num_states: usize,
    pub seq_len: usize,
    /// MASK index for absorbing processes.
    pub mask: Option<usize>,
}

impl ScoreLayout {
    pub fn new(num_states: usize, seq_len: usize, mask: Option<usize>) -> Self {
        Self {
            num_states,
            seq_len,
            mask,
        }
    }

    pub fn for_process(spec: &TransitionSpec, seq_len: usize) -> Self {
        Self::new(spec.num_states(), seq_len, spec.mask())
    }

    pub fn check(&self, seq: &[usize]) -> Result<()> {
        if seq.len() != self.seq_len {
            return Err(Error::arg(format!(
                "sequence length {} does not match model length {}",
                seq.len(),
                self.seq_len
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&x| x >= self.num_states) {
            return Err(Error::arg(format!(
                "token {bad} out of range for {} states",
                self.num_states
            )));
        }
        Ok(())
    }

    /// True when entry `(pos, y)` carries no reverse rate at `seq`.
    pub fn is_excluded(&self, seq: &[usize], pos: usize, y: usize) -> bool {
        match self.mask {
            Some(mask) => seq[pos] != mask && y != seq[pos],
            None => false,
        }
    }

    /// Wraps raw log-scores, zeroing self entries and flagging exclusions.
    pub fn finish(&self, seq: &[usize], mut log_scores: Vec<f64>, sigma_bar: f64) -> ScoreEval {
        let n = self.num_states;
        let mut excluded = vec![false; log_scores.len()];
        for (i, &tok) in seq.iter().enumerate() {
            for y in 0..n {
                let k = i * n + y;
                if y == tok {
                    log_scores[k] = 0.0;
                } else if self.is_excluded(seq, i, y) {
                    excluded[k] = true;
                    log_scores[k] = 0.0;
                }
            }
        }
        ScoreEval {
            layout: *self,
            log_scores,
            excluded,
            sigma_bar,
        }
    }
}

/// A `d × n_states` table of log concrete scores at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEval {
    layout: ScoreLayout,
    log_scores: Vec<f64>,
    excluded: Vec<bool>,
    sigma_bar: f64,
}

impl ScoreEval {
    pub fn layout(&self) -> &ScoreLayout {
        &self.layout
    }

    pub fn sigma_bar(&self) -> f64 {
        self.sigma_bar
    }

    pub fn is_excluded(&self, pos: usize, y: usize) -> bool {
        self.excluded[pos * self.layout.num_states + y]
    }

    /// Log-score, or `None` for an excluded entry.
    pub fn log_score(&self, pos: usize, y: usize) -> Option<f64> {
        let k = pos * self.layout.num_states + y;
        (!self.excluded[k]).then(|| self.log_scores[k])
    }

    /// Score ratio; excluded entries read as 0.
    pub fn ratio(&self, pos: usize, y: usize) -> f64 {
        self.log_score(pos, y).map_or(0.0, f64::exp)
    }

    /// Ratios of one position, self entry 1 and excluded entries 0.
    pub fn ratio_row(&self, pos: usize) -> Vec<f64> {
        (0..self.layout.num_states).map(|y| self.ratio(pos, y)).collect()
    }

    /// Raw table, row-major; excluded entries hold 0.
    pub fn raw(&self) -> &[f64] {
        &self.log_scores
    }
}

/// Anything that produces concrete scores for sequences.
pub trait ScoreModel: Send + Sync {
    fn num_states(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn eval(&self, seq: &[usize], sigma_bar: f64) -> Result<ScoreEval>;
}

/// A score model with a flat parameter vector and reverse-mode gradients.
pub trait TrainableScore: ScoreModel {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Adds `∂L/∂θ` to `grad` given `∂L/∂(log-scores)` at `seq`. Entries of
    /// `upstream` at self or excluded positions are ignored.
    fn accumulate_grad(
        &self,
        seq: &[usize],
        sigma_bar: f64,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()>;

    fn descriptor(&self) -> ModelDescriptor;
}

/// Gradient of a scalar loss with respect to the model parameters.
pub fn backprop_scores<M: TrainableScore + ?Sized>(
    model: &M,
    seq: &[usize],
    sigma_bar: f64,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; model.params().len()];
    model.accumulate_grad(seq, sigma_bar, upstream, &mut grad)?;
    Ok(grad)
}

fn check_upstream(layout: &ScoreLayout, upstream: &[f64]) -> Result<()> {
    if upstream.len() != layout.num_states * layout.seq_len {
        return Err(Error::arg("upstream gradient has the wrong shape"));
    }
    if upstream.iter().any(|g| !g.is_finite()) {
        return Err(Error::arg("upstream gradient is not finite"));
    }
    Ok(())
}

/// Serializable hyperparameters; enough to rebuild a model around a
/// parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum ModelDescriptor {
    Tabular {
        num_states: usize,
        seq_len: usize,
        absorbing: bool,
    },
    Mlp(MlpConfig),
    MeanMlp {
        #[serde(flatten)]
        mlp: MlpConfig,
        process: TransitionSpec,
    },
}

impl ModelDescriptor {
    pub fn num_states(&self) -> usize {
        match self {
            ModelDescriptor::Tabular { num_states, .. } => *num_states,
            ModelDescriptor::Mlp(c) | ModelDescriptor::MeanMlp { mlp: c, .. } => c.num_states,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            ModelDescriptor::Tabular { seq_len, .. } => *seq_len,
            ModelDescriptor::Mlp(c) | ModelDescriptor::MeanMlp { mlp: c, .. } => c.seq_len,
        }
    }

    pub fn absorbing(&self) -> bool {
        match self {
            ModelDescriptor::Tabular { absorbing, .. } => *absorbing,
            ModelDescriptor::Mlp(c) | ModelDescriptor::MeanMlp { mlp: c, .. } => c.absorbing,
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        match self {
            ModelDescriptor::Tabular {
                num_states,
                seq_len,
                ..
            } => Ok(TabularScore::table_size(*num_states, *seq_len)?),
            ModelDescriptor::Mlp(c) | ModelDescriptor::MeanMlp { mlp: c, .. } => {
                Ok(c.param_count())
            }
        }
    }

    /// Fresh model with the documented initialization.
    pub fn init(&self, seed: u64) -> Result<AnyModel> {
        Ok(match self {
            ModelDescriptor::Tabular {
                num_states,
                seq_len,
                absorbing,
            } => AnyModel::Tabular(TabularScore::new(*num_states, *seq_len, *absorbing)?),
            ModelDescriptor::Mlp(c) => AnyModel::Mlp(MlpScore::new(*c, seed)?),
            ModelDescriptor::MeanMlp { mlp, process } => {
                AnyModel::MeanMlp(MeanMlpScore::new(*mlp, *process, seed)?)
            }
        })
    }

    /// Model around an existing parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<AnyModel> {
        if params.len() != self.param_count()? {
            return Err(Error::arg(format!(
                "descriptor needs {} parameters, got {}",
                self.param_count()?,
                params.len()
            )));
        }
        let mut model = self.init(0)?;
        model.params_mut().copy_from_slice(&params);
        Ok(model)
    }
}

/// One free log-score per (sequence, position, token). No noise dependence.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularScore {
    layout: ScoreLayout,
    params: Vec<f64>,
}

impl TabularScore {
    fn table_size(num_states: usize, seq_len: usize) -> Result<usize> {
        let seqs = crate::oracle::space_size(num_states, seq_len)
            .filter(|&s| s <= MAX_TABULAR_SEQUENCES)
            .ok_or(Error::Capacity {
                what: "tabular score table",
                size: crate::oracle::space_size(num_states, seq_len).unwrap_or(usize::MAX),
                limit: MAX_TABULAR_SEQUENCES,
            })?;
        Ok(seqs * seq_len * num_states)
    }

    /// All-zero table, i.e. every ratio 1.
    pub fn new(num_states: usize, seq_len: usize, absorbing: bool) -> Result<Self> {
        let size = Self::table_size(num_states, seq_len)?;
        Ok(Self {
            layout: ScoreLayout::new(num_states, seq_len, absorbing.then(|| num_states - 1)),
            params: vec![0.0; size],
        })
    }

    fn offset(&self, seq: &[usize]) -> usize {
        crate::oracle::encode_sequence(seq, self.layout.num_states)
            * self.layout.seq_len
            * self.layout.num_states
    }

    /// Overwrites the row for `seq` with the given log-scores.
    pub fn set_log_scores(&mut self, seq: &[usize], log_scores: &[f64]) -> Result<()> {
        self.layout.check(seq)?;
        let width = self.layout.seq_len * self.layout.num_states;
        if log_scores.len() != width {
            return Err(Error::arg("log-score table has the wrong shape"));
        }
        let off = self.offset(seq);
        self.params[off..off + width].copy_from_slice(log_scores);
        Ok(())
    }
}

impl ScoreModel for TabularScore {
    fn num_states(&self) -> usize {
        self.layout.num_states
    }

    fn seq_len(&self) -> usize {
        self.layout.seq_len
    }

    fn eval(&self, seq: &[usize], sigma_bar: f64) -> Result<ScoreEval> {
        self.layout.check(seq)?;
        let off = self.offset(seq);
        let width = self.layout.seq_len * self.layout.num_states;
        Ok(self
            .layout
            .finish(seq, self.params[off..off + width].to_vec(), sigma_bar))
    }
}

impl TrainableScore for TabularScore {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_grad(
        &self,
        seq: &[usize],
        _sigma_bar: f64,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        self.layout.check(seq)?;
        check_upstream(&self.layout, upstream)?;
        let off = self.offset(seq);
        let n = self.layout.num_states;
        for (k, &g) in upstream.iter().enumerate() {
            let (i, y) = (k / n, k % n);
            if y == seq[i] || self.layout.is_excluded(seq, i, y) {
                continue;
            }
            grad[off + k] += g;
        }
        Ok(())
    }

    fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor::Tabular {
            num_states: self.layout.num_states,
            seq_len: self.layout.seq_len,
            absorbing: self.layout.mask.is_some(),
        }
    }
}

/// Hyperparameters of [`MlpScore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub seq_len: usize,
    pub num_states: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub noise_features: usize,
    pub absorbing: bool,
}

impl MlpConfig {
    fn input_dim(&self) -> usize {
        self.seq_len * self.embed_dim + self.noise_features
    }

    fn output_dim(&self) -> usize {
        self.seq_len * self.num_states
    }

    /// Parameter count; the layout is, in order:
    /// embeddings `[n_states × e]`, `W1 [h × (d·e + k)]`, `b1 [h]`,
    /// `W2 [h × h]`, `b2 [h]`, head `[d·n_states × h]`, head bias `[d·n_states]`.
    /// All matrices row-major.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        self.num_states * self.embed_dim
            + h * self.input_dim()
            + h
            + h * h
            + h
            + self.output_dim() * h
            + self.output_dim()
    }

    fn validate(&self) -> Result<()> {
        if self.seq_len == 0
            || self.num_states < 2
            || self.embed_dim == 0
            || self.hidden == 0
            || self.noise_features == 0
        {
            return Err(Error::arg(format!("degenerate MLP configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct MlpOffsets {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wo: usize,
    bo: usize,
}

impl MlpOffsets {
    fn new(c: &MlpConfig) -> Self {
        let h = c.hidden;
        let emb = 0;
        let w1 = emb + c.num_states * c.embed_dim;
        let b1 = w1 + h * c.input_dim();
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wo = b2 + h;
        let bo = wo + c.output_dim() * h;
        Self {
            emb,
            w1,
            b1,
            w2,
            b2,
            wo,
            bo,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Fixed features of `log σ̄`: a scaled linear term followed by sin/cos pairs
/// at halving frequencies 1, 1/2, 1/4, ...
pub fn noise_features(sigma_bar: f64, k: usize) -> Vec<f64> {
    let v = sigma_bar.max(1e-300).ln();
    (0..k)
        .map(|j| {
            if j == 0 {
                v / 4.0
            } else {
                let freq = 0.5f64.powi(((j - 1) / 2) as i32);
                if j % 2 == 1 {
                    (freq * v).sin()
                } else {
                    (freq * v).cos()
                }
            }
        })
        .collect()
}

struct MlpTape {
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
}

/// Two-hidden-layer perceptron over concatenated token embeddings and noise
/// features, with a separate output head per position.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScore {
    config: MlpConfig,
    layout: ScoreLayout,
    params: Vec<f64>,
}

impl MlpScore {
    /// Embeddings ~ N(0, 1), hidden weights ~ N(0, 1/fan_in), biases and the
    /// whole output head zero, so the fresh model scores every ratio as 1.
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let off = MlpOffsets::new(&config);
        let mut params = vec![0.0; config.param_count()];
        let mut fill = |range: std::ops::Range<usize>, std: f64| {
            for p in &mut params[range] {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(off.emb..off.w1, 1.0);
        fill(off.w1..off.b1, (1.0 / config.input_dim() as f64).sqrt());
        fill(off.w2..off.b2, (1.0 / config.hidden as f64).sqrt());
        Ok(Self {
            layout: ScoreLayout::new(
                config.num_states,
                config.seq_len,
                config.absorbing.then(|| config.num_states - 1),
            ),
            config,
            params,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    fn forward(&self, seq: &[usize], sigma_bar: f64) -> (MlpTape, Vec<f64>) {
        let c = &self.config;
        let off = MlpOffsets::new(c);
        let p = &self.params;
        let (e, h, din) = (c.embed_dim, c.hidden, c.input_dim());

        let mut input = Vec::with_capacity(din);
        for &tok in seq {
            input.extend_from_slice(&p[off.emb + tok * e..off.emb + (tok + 1) * e]);
        }
        input.extend(noise_features(sigma_bar, c.noise_features));

        let affine = |w: usize, b: usize, x: &[f64], rows: usize| -> Vec<f64> {
            (0..rows)
                .map(|r| {
                    let row = &p[w + r * x.len()..w + (r + 1) * x.len()];
                    p[b + r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        };
        let z1 = affine(off.w1, off.b1, &input, h);
        let a1: Vec<f64> = z1.iter().map(|&z| silu(z)).collect();
        let z2 = affine(off.w2, off.b2, &a1, h);
        let a2: Vec<f64> = z2.iter().map(|&z| silu(z)).collect();
        let out = affine(off.wo, off.bo, &a2, c.output_dim());
        (
            MlpTape {
                input,
                z1,
                a1,
                z2,
                a2,
            },
            out,
        )
    }

    /// Backward pass from a gradient on the raw outputs.
    fn backward(&self, seq: &[usize], tape: &MlpTape, g_out: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let off = MlpOffsets::new(c);
        let p = &self.params;
        let (e, h, din) = (c.embed_dim, c.hidden, c.input_dim());

        let mut da2 = vec![0.0; h];
        for (o, &g) in g_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[off.bo + o] += g;
            let w = off.wo + o * h;
            for j in 0..h {
                grad[w + j] += g * tape.a2[j];
                da2[j] += g * p[w + j];
            }
        }
        let dz2: Vec<f64> = da2.iter().zip(&tape.z2).map(|(d, &z)| d * silu_grad(z)).collect();
        let mut da1 = vec![0.0; h];
        for (r, &g) in dz2.iter().enumerate() {
            grad[off.b2 + r] += g;
            let w = off.w2 + r * h;
            for j in 0..h {
                grad[w + j] += g * tape.a1[j];
                da1[j] += g * p[w + j];
            }
        }
        let dz1: Vec<f64> = da1.iter().zip(&tape.z1).map(|(d, &z)| d * silu_grad(z)).collect();
        let mut dinput = vec![0.0; din];
        for (r, &g) in dz1.iter().enumerate() {
            grad[off.b1 + r] += g;
            let w = off.w1 + r * din;
            for j in 0..din {
                grad[w + j] += g * tape.input[j];
                dinput[j] += g * p[w + j];
            }
        }
        for (i, &tok) in seq.iter().enumerate() {
            for k in 0..e {
                grad[off.emb + tok * e + k] += dinput[i * e + k];
            }
        }
    }
}

impl ScoreModel for MlpScore {
    fn num_states(&self) -> usize {
        self.config.num_states
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn eval(&self, seq: &[usize], sigma_bar: f64) -> Result<ScoreEval> {
        self.layout.check(seq)?;
        let (_, out) = self.forward(seq, sigma_bar);
        Ok(self.layout.finish(seq, out, sigma_bar))
    }
}

impl TrainableScore for MlpScore {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_grad(
        &self,
        seq: &[usize],
        sigma_bar: f64,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        self.layout.check(seq)?;
        check_upstream(&self.layout, upstream)?;
        let n = self.config.num_states;
        let g_out: Vec<f64> = upstream
            .iter()
            .enumerate()
            .map(|(k, &g)| {
                let (i, y) = (k / n, k % n);
                if y == seq[i] || self.layout.is_excluded(seq, i, y) {
                    0.0
                } else {
                    g
                }
            })
            .collect();
        let (tape, _) = self.forward(seq, sigma_bar);
        self.backward(seq, &tape, &g_out, grad);
        Ok(())
    }

    fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor::Mlp(self.config)
    }
}

/// A model of the per-position clean-token posterior `p_{0|t}(x_0^i | x_t)`.
pub trait MeanModel: Send + Sync {
    /// Row-major `d × n` distributions over ordinary tokens.
    fn posterior(&self, x_t: &[usize], sigma_bar: f64) -> Result<Vec<f64>>;
}

/// Concrete score implied by a mean model:
/// `s_{i,y} = Σ_{x0} q_i(x0) · p_{t|0}(y | x0) / p_{t|0}(x_t^i | x0)`.
pub fn score_from_mean<M: MeanModel + ?Sized>(
    mean: &M,
    spec: &TransitionSpec,
    sigma_bar: f64,
    x_t: &[usize],
) -> Result<ScoreEval> {
    let q = mean.posterior(x_t, sigma_bar)?;
    let (logs, _) = mean_to_log_scores(&q, spec, sigma_bar, x_t, false)?;
    let layout = ScoreLayout::for_process(spec, x_t.len());
    Ok(layout.finish(x_t, logs, sigma_bar))
}

/// Log-scores from per-position posteriors; optionally also returns, per
/// position, the Jacobian `∂ log s_{i,y} / ∂ q_i(x0)` flattened `[y][x0]`.
#[allow(clippy::type_complexity)]
fn mean_to_log_scores(
    q: &[f64],
    spec: &TransitionSpec,
    sigma_bar: f64,
    x_t: &[usize],
    want_jacobian: bool,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = spec.n;
    let m = spec.num_states();
    let d = x_t.len();
    if q.len() != d * n {
        return Err(Error::arg("posterior table has the wrong shape"));
    }
    let layout = ScoreLayout::for_process(spec, d);
    let mut logs = vec![0.0; d * m];
    let mut jac = Vec::new();
    for i in 0..d {
        let xi = x_t[i];
        let row = &q[i * n..(i + 1) * n];
        let mut jrow = if want_jacobian { vec![0.0; m * n] } else { Vec::new() };
        let excluded_position = (0..m).all(|y| y == xi || layout.is_excluded(x_t, i, y));
        if excluded_position {
            if want_jacobian {
                jac.push(jrow);
            }
            continue;
        }
        let mut denom = vec![0.0; n];
        for x0 in 0..n {
            denom[x0] = spec.kernel_entry(sigma_bar, xi, x0);
            if row[x0] > 0.0 && denom[x0] <= 0.0 {
                return Err(Error::UndefinedScore(format!(
                    "p(x_t = {xi} | x0 = {x0}) is zero at position {i}"
                )));
            }
        }
        for y in 0..m {
            if y == xi {
                continue;
            }
            let mut s = 0.0;
            for x0 in 0..n {
                if row[x0] > 0.0 {
                    s += row[x0] * spec.kernel_entry(sigma_bar, y, x0) / denom[x0];
                }
            }
            logs[i * m + y] = if s > 0.0 { s.ln().max(MIN_LOG_SCORE) } else { MIN_LOG_SCORE };
            if want_jacobian && s > 0.0 {
                for x0 in 0..n {
                    if denom[x0] > 0.0 {
                        jrow[y * n + x0] = spec.kernel_entry(sigma_bar, y, x0) / denom[x0] / s;
                    }
                }
            }
        }
        if want_jacobian {
            jac.push(jrow);
        }
    }
    Ok((logs, jac))
}

/// Mean-parameterized score model: an [`MlpScore`] backbone whose first `n`
/// outputs per position are softmax logits over clean tokens, mapped to
/// scores through [`score_from_mean`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeanMlpScore {
    backbone: MlpScore,
    spec: TransitionSpec,
}

impl MeanMlpScore {
    pub fn new(config: MlpConfig, spec: TransitionSpec, seed: u64) -> Result<Self> {
        if config.num_states != spec.num_states() || config.absorbing != spec.is_absorbing() {
            return Err(Error::arg("mean model configuration does not match the process"));
        }
        Ok(Self {
            backbone: MlpScore::new(config, seed)?,
            spec,
        })
    }

    fn softmax_rows(&self, out: &[f64]) -> Vec<f64> {
        let n = self.spec.n;
        let m = self.spec.num_states();
        let mut q = Vec::with_capacity(self.backbone.config.seq_len * n);
        for row in out.chunks(m) {
            let logits = &row[..n];
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            q.extend(ex.into_iter().map(|v| v / z));
        }
        q
    }
}

impl MeanModel for MeanMlpScore {
    fn posterior(&self, x_t: &[usize], sigma_bar: f64) -> Result<Vec<f64>> {
        self.backbone.layout.check(x_t)?;
        let (_, out) = self.backbone.forward(x_t, sigma_bar);
        Ok(self.softmax_rows(&out))
    }
}

impl ScoreModel for MeanMlpScore {
    fn num_states(&self) -> usize {
        self.backbone.num_states()
    }

    fn seq_len(&self) -> usize {
        self.backbone.seq_len()
    }

    fn eval(&self, seq: &[usize], sigma_bar: f64) -> Result<ScoreEval> {
        score_from_mean(self, &self.spec, sigma_bar, seq)
    }
}

impl TrainableScore for MeanMlpScore {
    fn params(&self) -> &[f64] {
        self.backbone.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.backbone.params_mut()
    }

    fn accumulate_grad(
        &self,
        seq: &[usize],
        sigma_bar: f64,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        let layout = &self.backbone.layout;
        layout.check(seq)?;
        check_upstream(layout, upstream)?;
        let n = self.spec.n;
        let m = self.spec.num_states();
        let (tape, out) = self.backbone.forward(seq, sigma_bar);
        let q = self.softmax_rows(&out);
        let (_, jac) = mean_to_log_scores(&q, &self.spec, sigma_bar, seq, true)?;
        let mut g_out = vec![0.0; out.len()];
        for i in 0..seq.len() {
            // dL/dq_i(x0) from dL/dlog s_{i,y}
            let mut dq = vec![0.0; n];
            for y in 0..m {
                if y == seq[i] || layout.is_excluded(seq, i, y) {
                    continue;
                }
                let g = upstream[i * m + y];
                if g == 0.0 {
                    continue;
                }
                for x0 in 0..n {
                    dq[x0] += g * jac[i][y * n + x0];
                }
            }
            // softmax backward
            let qi = &q[i * n..(i + 1) * n];
            let dot: f64 = dq.iter().zip(qi).map(|(a, b)| a * b).sum();
            for x0 in 0..n {
                g_out[i * m + x0] = qi[x0] * (dq[x0] - dot);
            }
        }
        self.backbone.backward(seq, &tape, &g_out, grad);
        Ok(())
    }

    fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor::MeanMlp {
            mlp: self.backbone.config,
            process: self.spec,
        }
    }
}

/// Closed set of trainable backends, for checkpoints and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Tabular(TabularScore),
    Mlp(MlpScore),
    MeanMlp(MeanMlpScore),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Tabular($m) => $e,
            AnyModel::Mlp($m) => $e,
            AnyModel::MeanMlp($m) => $e,
        }
    };
}

impl ScoreModel for AnyModel {
    fn num_states(&self) -> usize {
        dispatch!(self, m => m.num_states())
    }

    fn seq_len(&self) -> usize {
        dispatch!(self, m => m.seq_len())
    }

    fn eval(&self, seq: &[usize], sigma_bar: f64) -> Result<ScoreEval> {
        dispatch!(self, m => m.eval(seq, sigma_bar))
    }
}

impl TrainableScore for AnyModel {
    fn params(&self) -> &[f64] {
        dispatch!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut [f64] {
        dispatch!(self, m => m.params_mut())
    }

    fn accumulate_grad(
        &self,
        seq: &[usize],
        sigma_bar: f64,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        dispatch!(self, m => m.accumulate_grad(seq, sigma_bar, upstream, grad))
    }

    fn descriptor(&self) -> ModelDescriptor {
        dispatch!(self, m => m.descriptor())
    }
}

/// Random perturbation of every parameter, for tests and ablations.
pub fn jitter_params<M: TrainableScore + ?Sized, R: Rng + ?Sized>(model: &mut M, scale: f64, rng: &mut R) {
    for p in model.params_mut() {
        *p += scale * (2.0 * rng.random::<f64>() - 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{
        evolve, exact_concrete_score, exact_mean_posterior, finite_difference_grad,
        EnumeratedDist, ExactScoreModel,
    };

    fn mlp_config(absorbing: bool) -> MlpConfig {
        MlpConfig {
            seq_len: 3,
            num_states: if absorbing { 5 } else { 4 },
            embed_dim: 4,
            hidden: 8,
            noise_features: 5,
            absorbing,
        }
    }

    #[test]
    fn fresh_models_score_all_ones() {
        let mlp = MlpScore::new(mlp_config(false), 0).unwrap();
        let tab = TabularScore::new(4, 3, false).unwrap();
        for model in [&mlp as &dyn ScoreModel, &tab] {
            let ev = model.eval(&[0, 3, 1], 0.7).unwrap();
            assert!(ev.raw().iter().all(|&v| v == 0.0));
            assert!((0..3).all(|i| ev.ratio_row(i).iter().all(|&r| r == 1.0)));
        }
    }

    #[test]
    fn eval_rejects_bad_sequences() {
        let mlp = MlpScore::new(mlp_config(false), 0).unwrap();
        assert!(matches!(mlp.eval(&[0, 1], 1.0), Err(Error::Argument(_))));
        assert!(matches!(mlp.eval(&[0, 1, 4], 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = MlpScore::new(mlp_config(true), 3).unwrap();
        jitter_params(&mut mlp, 0.5, &mut rng);
        let a = mlp.eval(&[4, 0, 2], 0.3).unwrap();
        let b = mlp.eval(&[4, 0, 2], 0.3).unwrap();
        assert_eq!(a.raw(), b.raw());
        assert_eq!(MlpScore::new(mlp_config(true), 3).unwrap(), MlpScore::new(mlp_config(true), 3).unwrap());
    }

    #[test]
    fn absorbing_exclusion_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = MlpScore::new(mlp_config(true), 1).unwrap();
        jitter_params(&mut mlp, 0.5, &mut rng);
        let ev = mlp.eval(&[4, 1, 4], 2.0).unwrap();
        for y in 0..5 {
            assert_eq!(ev.is_excluded(1, y), y != 1);
            assert!(!ev.is_excluded(0, y));
        }
        assert_eq!(ev.ratio(1, 4), 0.0);
        assert!(ev.ratio(0, 2) > 0.0);
        assert_eq!(ev.ratio(0, 4), 1.0);
    }

    #[test]
    fn parameter_count_follows_layout() {
        let c = mlp_config(false);
        // 4*4 + 8*(12+5) + 8 + 64 + 8 + 12*8 + 12
        assert_eq!(c.param_count(), 16 + 136 + 8 + 64 + 8 + 96 + 12);
        assert_eq!(MlpScore::new(c, 0).unwrap().params().len(), c.param_count());
        let desc = ModelDescriptor::Mlp(c);
        assert_eq!(desc.param_count().unwrap(), c.param_count());
    }

    #[test]
    fn tabular_capacity_gate() {
        assert!(matches!(
            TabularScore::new(2, 17, false),
            Err(Error::Capacity { .. })
        ));
    }

    fn scalar_of_scores<M: ScoreModel>(model: &M, seq: &[usize], sb: f64, weights: &[f64]) -> f64 {
        let ev = model.eval(seq, sb).unwrap();
        // smooth nonlinear functional of the scores
        ev.raw()
            .iter()
            .zip(weights)
            .map(|(l, w)| w * (l.exp() + 0.3 * l * l))
            .sum()
    }

    fn upstream_of<M: ScoreModel>(model: &M, seq: &[usize], sb: f64, weights: &[f64]) -> Vec<f64> {
        let ev = model.eval(seq, sb).unwrap();
        ev.raw()
            .iter()
            .zip(weights)
            .map(|(l, w)| w * (l.exp() + 0.6 * l))
            .collect()
    }

    fn check_gradient<M: TrainableScore + Clone>(model: &M, seq: &[usize], sb: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w: Vec<f64> = (0..model.seq_len() * model.num_states())
            .map(|_| rng.random::<f64>() - 0.3)
            .collect();
        let analytic = backprop_scores(model, seq, sb, &upstream_of(model, seq, sb, &w)).unwrap();
        let numeric = finite_difference_grad(
            |theta| {
                let mut m = model.clone();
                m.params_mut().copy_from_slice(theta);
                scalar_of_scores(&m, seq, sb, &w)
            },
            model.params(),
            1e-4,
        );
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3);
        for (k, (a, b)) in analytic.iter().zip(&numeric).enumerate() {
            let err = (a - b).abs() / (b.abs().max(0.05 * scale));
            assert!(err <= 1e-4, "param {k}: analytic {a} numeric {b}");
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        for absorbing in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut mlp = MlpScore::new(mlp_config(absorbing), 0).unwrap();
            jitter_params(&mut mlp, 0.5, &mut rng);
            let seq = if absorbing { [4, 1, 4] } else { [2, 0, 3] };
            check_gradient(&mlp, &seq, 0.4);
        }
    }

    #[test]
    fn tabular_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tab = TabularScore::new(3, 2, false).unwrap();
        jitter_params(&mut tab, 0.7, &mut rng);
        check_gradient(&tab, &[2, 1], 1.0);
    }

    #[test]
    fn mean_mlp_gradient_matches_finite_differences() {
        for spec in [TransitionSpec::uniform(4), TransitionSpec::absorbing(4)] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut c = mlp_config(spec.is_absorbing());
            c.num_states = spec.num_states();
            let mut model = MeanMlpScore::new(c, spec, 2).unwrap();
            jitter_params(&mut model, 0.5, &mut rng);
            let seq = if spec.is_absorbing() { [4, 2, 4] } else { [1, 3, 0] };
            check_gradient(&model, &seq, 0.8);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mlp = MlpScore::new(mlp_config(false), 0).unwrap();
        jitter_params(&mut mlp, 0.5, &mut rng);
        let g = backprop_scores(&mlp, &[0, 1, 2], 1.0, &[0.0; 12]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(backprop_scores(&mlp, &[0, 1, 2], 1.0, &[f64::NAN; 12]).is_err());
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mlp = MlpScore::new(mlp_config(false), 0).unwrap();
        jitter_params(&mut mlp, 0.5, &mut rng);
        let u: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let v: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let gu = backprop_scores(&mlp, &[0, 1, 2], 1.0, &u).unwrap();
        let gv = backprop_scores(&mlp, &[0, 1, 2], 1.0, &v).unwrap();
        let guv = backprop_scores(&mlp, &[0, 1, 2], 1.0, &uv).unwrap();
        for k in 0..gu.len() {
            assert!((guv[k] - 2.0 * gu[k] + 3.0 * gv[k]).abs() < 1e-12);
        }
    }

    struct PosteriorOracle {
        p: EnumeratedDist,
        spec: TransitionSpec,
    }

    impl MeanModel for PosteriorOracle {
        fn posterior(&self, x_t: &[usize], sigma_bar: f64) -> Result<Vec<f64>> {
            exact_mean_posterior(&self.p, &self.spec, sigma_bar, x_t)
        }
    }

    #[test]
    fn exact_posterior_reproduces_concrete_score() {
        let p = EnumeratedDist::new(4, 1, vec![0.1, 0.45, 0.15, 0.3]).unwrap();
        for spec in [TransitionSpec::uniform(4), TransitionSpec::absorbing(4)] {
            let oracle = PosteriorOracle { p: p.clone(), spec };
            let pt = evolve(&p.embed(spec.num_states()).unwrap(), &spec, 0.9).unwrap();
            for xt in 0..spec.num_states() {
                let ev = score_from_mean(&oracle, &spec, 0.9, &[xt]).unwrap();
                let exact = exact_concrete_score(&pt, &[xt]).unwrap();
                for y in 0..spec.num_states() {
                    if ev.is_excluded(0, y) {
                        continue;
                    }
                    assert!((ev.ratio(0, y) - exact[y]).abs() < 1e-9, "{:?} x={xt} y={y}", spec.kind);
                }
            }
        }
    }

    #[test]
    fn point_mass_mean_at_zero_noise() {
        struct PointMass;
        impl MeanModel for PointMass {
            fn posterior(&self, x_t: &[usize], _: f64) -> Result<Vec<f64>> {
                let mut q = vec![0.0; 3];
                q[x_t[0]] = 1.0;
                Ok(q)
            }
        }
        let spec = TransitionSpec::uniform(3);
        let ev = score_from_mean(&PointMass, &spec, 0.0, &[1]).unwrap();
        // p0 is the point mass itself, whose neighbor ratios are 0
        assert!(ev.ratio(0, 0) < 1e-300 && ev.ratio(0, 2) < 1e-300);
        assert_eq!(ev.ratio(0, 1), 1.0);
    }

    #[test]
    fn mean_bridge_excludes_unmasked_positions() {
        let p = EnumeratedDist::new(3, 2, vec![0.1, 0.2, 0.05, 0.05, 0.1, 0.1, 0.2, 0.1, 0.1]).unwrap();
        let spec = TransitionSpec::absorbing(3);
        let oracle = PosteriorOracle { p, spec };
        let ev = score_from_mean(&oracle, &spec, 0.5, &[1, 3]).unwrap();
        for y in 0..4 {
            assert_eq!(ev.is_excluded(0, y), y != 1);
        }
    }

    #[test]
    fn mean_bridge_rejects_unreachable_support() {
        struct Spread;
        impl MeanModel for Spread {
            fn posterior(&self, _: &[usize], _: f64) -> Result<Vec<f64>> {
                Ok(vec![0.5, 0.5])
            }
        }
        // σ̄ = 0 makes x_t = 0 unreachable from x0 = 1
        let spec = TransitionSpec::uniform(2);
        assert!(matches!(
            score_from_mean(&Spread, &spec, 0.0, &[0]),
            Err(Error::UndefinedScore(_))
        ));
    }

    #[test]
    fn tabular_copy_of_exact_scores_matches_oracle() {
        let p = EnumeratedDist::new(3, 2, vec![0.1, 0.2, 0.05, 0.05, 0.1, 0.1, 0.2, 0.1, 0.1]).unwrap();
        let spec = TransitionSpec::uniform(3);
        let exact = ExactScoreModel::new(&p, spec).unwrap();
        let mut tab = TabularScore::new(3, 2, false).unwrap();
        for idx in 0..9 {
            let seq = p.sequence(idx);
            tab.set_log_scores(&seq, exact.eval(&seq, 1.0).unwrap().raw()).unwrap();
        }
        for idx in 0..9 {
            let seq = p.sequence(idx);
            assert_eq!(tab.eval(&seq, 0.0).unwrap().raw(), exact.eval(&seq, 1.0).unwrap().raw());
        }
    }

    #[test]
    fn descriptor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = AnyModel::Mlp(MlpScore::new(mlp_config(true), 4).unwrap());
        jitter_params(&mut model, 0.1, &mut rng);
        let rebuilt = model.descriptor().with_params(model.params().to_vec()).unwrap();
        assert_eq!(rebuilt, model);
        assert!(model.descriptor().with_params(vec![0.0; 3]).is_err());
    }
}
