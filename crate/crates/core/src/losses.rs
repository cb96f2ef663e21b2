//! Score-entropy objectives and their gradients with respect to log-scores.
//!
//! Every loss reads log-scores straight from a [`ScoreEval`]: the `a·log s`
//! part uses the stored logarithm and only `s` itself is exponentiated.
//! The per-entry gradient of `w·(e^u − a·u + K(a))` in `u = log s` is
//! `w·(e^u − a)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{decode_sequence, kl_divergence, space_size, EnumeratedDist, MAX_ENUMERATED};
use crate::process::{NoiseSchedule, StationaryDist, TransitionSpec};
use crate::scores::{ScoreEval, ScoreModel, TrainableScore};
use crate::{ordered_sum, par_map, stream_rng};

/// `K(a) = a(log a − 1)` with `K(0) = 0`.
pub fn k_const(a: f64) -> Result<f64> {
    if !(a >= 0.0) || a.is_infinite() {
        return Err(Error::arg(format!("K(a) needs finite a >= 0, got {a}")));
    }
    Ok(k_const_unchecked(a))
}

pub(crate) fn k_const_unchecked(a: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a.ln() - 1.0)
    }
}

/// One score-entropy summand `w·(s − a·log s + K(a))`.
pub fn se_term(s: f64, a: f64, w: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::Domain(format!("score must be positive, got {s}")));
    }
    if !(w >= 0.0) || w.is_infinite() {
        return Err(Error::arg(format!("weight must be finite and nonnegative, got {w}")));
    }
    Ok(w * (s - a * s.ln() + k_const(a)?))
}

/// `∂/∂s` of [`se_term`]: `w·(1 − a/s)`.
pub fn se_term_grad(s: f64, a: f64, w: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::Domain(format!("score must be positive, got {s}")));
    }
    Ok(w * (1.0 - a / s))
}

/// Squared-error concrete score matching summand `½(s − a)²`.
pub fn csm_term(s: f64, a: f64) -> f64 {
    0.5 * (s - a) * (s - a)
}

pub fn csm_term_grad(s: f64, a: f64) -> f64 {
    s - a
}

/// One row of the scalar loss comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub s: f64,
    pub csm: f64,
    pub se: f64,
}

/// Ground-truth ratio used by [`loss_landscape`] when none is given.
pub const LANDSCAPE_DEFAULT_A: f64 = 0.2;

/// `(s, csm_term, se_term)` at `points` evenly spaced scores in `[lo, hi]`.
pub fn loss_landscape(lo: f64, hi: f64, points: usize, a: f64) -> Result<Vec<LandscapeRow>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::arg(format!("score range [{lo}, {hi}] must be positive and ordered")));
    }
    if points == 0 || (points == 1 && hi != lo) {
        return Err(Error::arg("landscape needs at least two points for a range"));
    }
    (0..points)
        .map(|k| {
            let s = if points == 1 {
                lo
            } else {
                lo + (hi - lo) * k as f64 / (points - 1) as f64
            };
            Ok(LandscapeRow {
                s,
                csm: csm_term(s, a),
                se: se_term(s, a, 1.0)?,
            })
        })
        .collect()
}

/// Per-entry weights `w(x, i, y)` for replacing token `x_i` by `y`.
pub trait PairWeights: Sync {
    fn weight(&self, x: &[usize], pos: usize, y: usize) -> f64;
}

impl<F: Fn(&[usize], usize, usize) -> f64 + Sync> PairWeights for F {
    fn weight(&self, x: &[usize], pos: usize, y: usize) -> f64 {
        self(x, pos, y)
    }
}

/// `w ≡ 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitWeights;

impl PairWeights for UnitWeights {
    fn weight(&self, _: &[usize], _: usize, _: usize) -> f64 {
        1.0
    }
}

/// `w(x, i, y) = Q(x_i, y)`, the rate of jumping from `y` into `x_i`.
#[derive(Debug, Clone, Copy)]
pub struct RateWeights(pub TransitionSpec);

impl PairWeights for RateWeights {
    fn weight(&self, x: &[usize], pos: usize, y: usize) -> f64 {
        if x[pos] == y {
            0.0
        } else {
            self.0.rate_unchecked(x[pos], y)
        }
    }
}

/// A Monte Carlo (or exact, with zero error) estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            stderr: 0.0,
            samples: 0,
        }
    }

    /// Mean and standard error of iid draws.
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = ordered_sum(values.iter().copied()) / n as f64;
        let var = if n > 1 {
            ordered_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64
        } else {
            f64::INFINITY
        };
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            samples: n,
        }
    }
}

fn check_model_dist<M: ScoreModel + ?Sized>(model: &M, p: &EnumeratedDist) -> Result<()> {
    if p.num_states() != model.num_states() || p.seq_len() != model.seq_len() {
        return Err(Error::arg("distribution and model disagree on shape"));
    }
    if p.len() > MAX_ENUMERATED {
        return Err(Error::Capacity {
            what: "enumerated loss",
            size: p.len(),
            limit: MAX_ENUMERATED,
        });
    }
    Ok(())
}

fn excluded_weight_error(pos: usize, y: usize, w: f64) -> Error {
    Error::Domain(format!(
        "entry ({pos}, {y}) is structurally excluded but has weight {w}"
    ))
}

/// Per-sequence loss contributions plus optional log-score gradients,
/// indexed by sequence.
struct Accumulated {
    value: f64,
    upstream: Vec<(usize, Vec<f64>)>,
}

fn se_accumulate<M, W>(
    model: &M,
    p: &EnumeratedDist,
    weights: &W,
    sigma_bar: f64,
    want_grad: bool,
) -> Result<Accumulated>
where
    M: ScoreModel + ?Sized,
    W: PairWeights + ?Sized,
{
    check_model_dist(model, p)?;
    let m = p.num_states();
    let d = p.seq_len();
    let per_seq = par_map(p.len(), |idx| -> Result<(f64, Option<Vec<f64>>)> {
        let px = p.probs()[idx];
        if px == 0.0 {
            return Ok((0.0, None));
        }
        let x = p.sequence(idx);
        let ev = model.eval(&x, sigma_bar)?;
        let mut value = 0.0;
        let mut up = want_grad.then(|| vec![0.0; d * m]);
        let mut z = x.clone();
        for i in 0..d {
            for y in 0..m {
                if y == x[i] {
                    continue;
                }
                let w = weights.weight(&x, i, y);
                if w == 0.0 {
                    continue;
                }
                let u = ev.log_score(i, y).ok_or_else(|| excluded_weight_error(i, y, w))?;
                z[i] = y;
                let a = p.prob(&z) / px;
                z[i] = x[i];
                value += w * (u.exp() - a * u + k_const_unchecked(a));
                if let Some(up) = up.as_mut() {
                    up[i * m + y] = px * w * (u.exp() - a);
                }
            }
        }
        Ok((px * value, up))
    });
    let mut value = 0.0;
    let mut upstream = Vec::new();
    for (idx, r) in per_seq.into_iter().enumerate() {
        let (v, up) = r?;
        value += v;
        if let Some(up) = up {
            upstream.push((idx, up));
        }
    }
    Ok(Accumulated { value, upstream })
}

fn reduce_grads<M: TrainableScore + ?Sized>(
    model: &M,
    p: &EnumeratedDist,
    sigma_bar: f64,
    upstream: &[(usize, Vec<f64>)],
) -> Result<Vec<f64>> {
    let parts = par_map(upstream.len(), |k| {
        let (idx, up) = &upstream[k];
        crate::scores::backprop_scores(model, &p.sequence(*idx), sigma_bar, up)
    });
    let mut grad = vec![0.0; model.params().len()];
    for part in parts {
        for (g, v) in grad.iter_mut().zip(part?) {
            *g += v;
        }
    }
    Ok(grad)
}

/// Score entropy `E_{x∼p} Σ_{i, y≠x_i} w·(s − a log s + K(a))` with true
/// ratios `a = p(y)/p(x)`, by enumeration.
pub fn score_entropy<M, W>(model: &M, p: &EnumeratedDist, weights: &W, sigma_bar: f64) -> Result<f64>
where
    M: ScoreModel + ?Sized,
    W: PairWeights + ?Sized,
{
    Ok(se_accumulate(model, p, weights, sigma_bar, false)?.value)
}

pub fn score_entropy_with_grad<M, W>(
    model: &M,
    p: &EnumeratedDist,
    weights: &W,
    sigma_bar: f64,
) -> Result<(f64, Vec<f64>)>
where
    M: TrainableScore + ?Sized,
    W: PairWeights + ?Sized,
{
    let acc = se_accumulate(model, p, weights, sigma_bar, true)?;
    let grad = reduce_grads(model, p, sigma_bar, &acc.upstream)?;
    Ok((acc.value, grad))
}

fn ise_accumulate<M, W>(
    model: &M,
    p: &EnumeratedDist,
    weights: &W,
    sigma_bar: f64,
    want_grad: bool,
) -> Result<Accumulated>
where
    M: ScoreModel + ?Sized,
    W: PairWeights + ?Sized,
{
    check_model_dist(model, p)?;
    let m = p.num_states();
    let d = p.seq_len();
    let evals: Vec<Result<ScoreEval>> =
        par_map(p.len(), |idx| model.eval(&p.sequence(idx), sigma_bar));
    let evals: Vec<ScoreEval> = evals.into_iter().collect::<Result<_>>()?;
    let mut value = 0.0;
    let mut ups: Vec<Option<Vec<f64>>> = vec![None; if want_grad { p.len() } else { 0 }];
    for idx in 0..p.len() {
        let px = p.probs()[idx];
        if px == 0.0 {
            continue;
        }
        let x = p.sequence(idx);
        let ev = &evals[idx];
        for i in 0..d {
            for y in 0..m {
                if y == x[i] {
                    continue;
                }
                let mut z = x.clone();
                z[i] = y;
                let zidx = crate::oracle::encode_sequence(&z, m);
                let w_xy = weights.weight(&x, i, y);
                if w_xy != 0.0 {
                    let u = ev.log_score(i, y).ok_or_else(|| excluded_weight_error(i, y, w_xy))?;
                    value += px * w_xy * u.exp();
                    if want_grad {
                        ups[idx].get_or_insert_with(|| vec![0.0; d * m])[i * m + y] +=
                            px * w_xy * u.exp();
                    }
                }
                let w_yx = weights.weight(&z, i, x[i]);
                if w_yx != 0.0 {
                    let u = evals[zidx]
                        .log_score(i, x[i])
                        .ok_or_else(|| excluded_weight_error(i, x[i], w_yx))?;
                    value -= px * w_yx * u;
                    if want_grad {
                        ups[zidx].get_or_insert_with(|| vec![0.0; d * m])[i * m + x[i]] -=
                            px * w_yx;
                    }
                }
            }
        }
    }
    let upstream = ups
        .into_iter()
        .enumerate()
        .filter_map(|(idx, u)| u.map(|u| (idx, u)))
        .collect();
    Ok(Accumulated { value, upstream })
}

/// Implicit score entropy `E_{x∼p} Σ [w_{xy} s(x)_y − w_{yx} log s(y)_x]`;
/// needs no ratios of `p` and differs from [`score_entropy`] by a constant.
pub fn implicit_score_entropy<M, W>(
    model: &M,
    p: &EnumeratedDist,
    weights: &W,
    sigma_bar: f64,
) -> Result<f64>
where
    M: ScoreModel + ?Sized,
    W: PairWeights + ?Sized,
{
    Ok(ise_accumulate(model, p, weights, sigma_bar, false)?.value)
}

pub fn implicit_score_entropy_with_grad<M, W>(
    model: &M,
    p: &EnumeratedDist,
    weights: &W,
    sigma_bar: f64,
) -> Result<(f64, Vec<f64>)>
where
    M: TrainableScore + ?Sized,
    W: PairWeights + ?Sized,
{
    let acc = ise_accumulate(model, p, weights, sigma_bar, true)?;
    let grad = reduce_grads(model, p, sigma_bar, &acc.upstream)?;
    Ok((acc.value, grad))
}

/// Denoising score entropy terms for one `(x_0, x_t)` pair; returns the value
/// and, if requested, `∂/∂(log-scores)` scaled by `scale`.
pub(crate) fn dse_pair_terms<W: PairWeights + ?Sized>(
    ev: &ScoreEval,
    x0: &[usize],
    xt: &[usize],
    spec: &TransitionSpec,
    sigma_bar: f64,
    weights: &W,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let m = spec.num_states();
    let mut value = 0.0;
    let mut grad = grad;
    for i in 0..xt.len() {
        let denom = spec.kernel_entry(sigma_bar, xt[i], x0[i]);
        if denom <= 0.0 {
            return Err(Error::Domain(format!(
                "x_t token {} unreachable from x_0 token {} at position {i}",
                xt[i], x0[i]
            )));
        }
        for y in 0..m {
            if y == xt[i] {
                continue;
            }
            let w = weights.weight(xt, i, y);
            if w == 0.0 {
                continue;
            }
            let u = ev.log_score(i, y).ok_or_else(|| excluded_weight_error(i, y, w))?;
            let r = spec.kernel_entry(sigma_bar, y, x0[i]) / denom;
            let s = u.exp();
            value += w * (s - r * u + k_const_unchecked(r));
            if let Some((g, scale)) = grad.as_mut() {
                g[i * m + y] += *scale * w * (s - r);
            }
        }
    }
    Ok(value)
}

/// How [`denoising_score_entropy`] takes the expectation over `(x_0, x_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DseMode {
    /// Enumerate every `x_t` reachable from the support of `p_0`.
    Exact,
    /// Draw `samples` pairs, pair `k` from stream `k` of `seed`.
    MonteCarlo { samples: usize, seed: u64 },
}

fn check_p0(p0: &EnumeratedDist, spec: &TransitionSpec, seq_len: usize) -> Result<()> {
    spec.validate()?;
    if p0.num_states() != spec.n && p0.num_states() != spec.num_states() {
        return Err(Error::arg("data distribution does not match the process vocabulary"));
    }
    if p0.seq_len() != seq_len {
        return Err(Error::arg("data distribution and model disagree on length"));
    }
    Ok(())
}

struct DseExact {
    value: f64,
    upstream: Vec<(Vec<usize>, Vec<f64>)>,
}

fn dse_exact<M, W>(
    model: &M,
    p0: &EnumeratedDist,
    spec: &TransitionSpec,
    sigma_bar: f64,
    weights: &W,
    want_grad: bool,
) -> Result<DseExact>
where
    M: ScoreModel + ?Sized,
    W: PairWeights + ?Sized,
{
    let m = spec.num_states();
    let d = model.seq_len();
    let size = space_size(m, d)
        .filter(|&s| s <= MAX_ENUMERATED)
        .ok_or(Error::Capacity {
            what: "exact denoising score entropy",
            size: space_size(m, d).unwrap_or(usize::MAX),
            limit: MAX_ENUMERATED,
        })?;
    let support: Vec<(Vec<usize>, f64)> = (0..p0.len())
        .filter(|&k| p0.probs()[k] > 0.0)
        .map(|k| (p0.sequence(k), p0.probs()[k]))
        .collect();
    let per_xt = par_map(size, |idx| -> Result<(f64, Option<Vec<f64>>)> {
        let xt = decode_sequence(idx, m, d);
        let mut ev = None;
        let mut value = 0.0;
        let mut up = want_grad.then(|| vec![0.0; d * m]);
        for (x0, p) in &support {
            let cond: f64 = xt
                .iter()
                .zip(x0)
                .map(|(&a, &b)| spec.kernel_entry(sigma_bar, a, b))
                .product();
            if cond == 0.0 {
                continue;
            }
            if ev.is_none() {
                ev = Some(model.eval(&xt, sigma_bar)?);
            }
            let weight = p * cond;
            value += weight
                * dse_pair_terms(
                    ev.as_ref().unwrap(),
                    x0,
                    &xt,
                    spec,
                    sigma_bar,
                    weights,
                    up.as_deref_mut().map(|g| (g, weight)),
                )?;
        }
        Ok((value, if ev.is_some() { up } else { None }))
    });
    let mut value = 0.0;
    let mut upstream = Vec::new();
    for (idx, r) in per_xt.into_iter().enumerate() {
        let (v, up) = r?;
        value += v;
        if let Some(up) = up {
            upstream.push((decode_sequence(idx, m, d), up));
        }
    }
    Ok(DseExact { value, upstream })
}

/// Denoising score entropy at total noise `σ̄`, with targets
/// `p_{σ̄}(y|x_0)/p_{σ̄}(x|x_0)` in place of the unknown marginal ratios.
/// `p0` lives on ordinary tokens (or the full state set).
pub fn denoising_score_entropy<M, W>(
    model: &M,
    p0: &EnumeratedDist,
    spec: &TransitionSpec,
    sigma_bar: f64,
    weights: &W,
    mode: DseMode,
) -> Result<Estimate>
where
    M: ScoreModel + ?Sized,
    W: PairWeights + ?Sized,
{
    check_p0(p0, spec, model.seq_len())?;
    crate::process::check_sigma_bar(sigma_bar)?;
    match mode {
        DseMode::Exact => Ok(Estimate::exact(
            dse_exact(model, p0, spec, sigma_bar, weights, false)?.value,
        )),
        DseMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::arg("need at least one Monte Carlo sample"));
            }
            let index = WeightedIndex::new(p0.probs()).map_err(|e| Error::arg(e.to_string()))?;
            let values = par_map(samples, |k| -> Result<f64> {
                let mut rng = stream_rng(seed, k as u64);
                let x0 = p0.sequence(index.sample(&mut rng));
                let xt: Vec<usize> = x0
                    .iter()
                    .map(|&a| spec.sample_forward_unchecked(sigma_bar, a, &mut rng))
                    .collect();
                let ev = model.eval(&xt, sigma_bar)?;
                dse_pair_terms(&ev, &x0, &xt, spec, sigma_bar, weights, None)
            });
            let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
            Ok(Estimate::from_samples(&values))
        }
    }
}

/// Exact denoising score entropy and its parameter gradient.
pub fn denoising_score_entropy_with_grad<M, W>(
    model: &M,
    p0: &EnumeratedDist,
    spec: &TransitionSpec,
    sigma_bar: f64,
    weights: &W,
) -> Result<(f64, Vec<f64>)>
where
    M: TrainableScore + ?Sized,
    W: PairWeights + ?Sized,
{
    check_p0(p0, spec, model.seq_len())?;
    crate::process::check_sigma_bar(sigma_bar)?;
    let acc = dse_exact(model, p0, spec, sigma_bar, weights, true)?;
    if !acc.value.is_finite() {
        return Ok((acc.value, vec![0.0; model.params().len()]));
    }
    let parts = par_map(acc.upstream.len(), |k| {
        let (xt, up) = &acc.upstream[k];
        crate::scores::backprop_scores(model, xt, sigma_bar, up)
    });
    let mut grad = vec![0.0; model.params().len()];
    for part in parts {
        for (g, v) in grad.iter_mut().zip(part?) {
            *g += v;
        }
    }
    Ok((acc.value, grad))
}

/// Distribution of the diffusion time used by Monte Carlo estimates of the
/// time integral. Returns `t` and its importance weight `1/density(t)`.
pub trait TimeSampler: Sync {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64);
}

/// `t ∼ U[t_min, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformTime {
    pub t_min: f64,
}

impl UniformTime {
    pub fn new(t_min: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&t_min) {
            return Err(Error::arg(format!("t_min must lie in [0, 1), got {t_min}")));
        }
        Ok(Self { t_min })
    }
}

impl TimeSampler for UniformTime {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let u: f64 = rng.random();
        (self.t_min + (1.0 - self.t_min) * u, 1.0 - self.t_min)
    }
}

/// One draw of the diffusion-weighted integrand.
pub(crate) fn dwdse_draw<M, T, R>(
    model: &M,
    x0: &[usize],
    spec: &TransitionSpec,
    schedule: &NoiseSchedule,
    sampler: &T,
    rng: &mut R,
) -> Result<f64>
where
    M: ScoreModel + ?Sized,
    T: TimeSampler + ?Sized,
    R: Rng + ?Sized,
{
    let (t, iw) = sampler.draw(rng);
    let sb = schedule.sigma_bar_unchecked(t);
    let scale = iw * schedule.sigma_unchecked(t);
    let xt: Vec<usize> = x0
        .iter()
        .map(|&a| spec.sample_forward_unchecked(sb, a, rng))
        .collect();
    let weights = RateWeights(*spec);
    // masked-free draws of the absorbing process carry no rate weight
    if spec.is_absorbing() && !xt.contains(&spec.n) {
        return Ok(0.0);
    }
    let ev = model.eval(&xt, sb)?;
    Ok(scale * dse_pair_terms(&ev, x0, &xt, spec, sb, &weights, None)?)
}

/// Diffusion-weighted denoising score entropy of one clean sequence: the
/// time integral of the denoising loss with weights `σ(t)·Q(x_t, y)`,
/// estimated with `mc_samples` draws of `(t, x_t)`.
pub fn dwdse<M, T>(
    model: &M,
    x0: &[usize],
    spec: &TransitionSpec,
    schedule: &NoiseSchedule,
    sampler: &T,
    mc_samples: usize,
    seed: u64,
) -> Result<Estimate>
where
    M: ScoreModel + ?Sized,
    T: TimeSampler + ?Sized,
{
    spec.validate()?;
    schedule.validate()?;
    if mc_samples == 0 {
        return Err(Error::arg("need at least one Monte Carlo sample"));
    }
    if x0.len() != model.seq_len() || x0.iter().any(|&x| x >= spec.n) {
        return Err(Error::arg("clean sequence does not match the model"));
    }
    let values = par_map(mc_samples, |k| {
        let mut rng = stream_rng(seed, k as u64);
        dwdse_draw(model, x0, spec, schedule, sampler, &mut rng)
    });
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&values))
}

/// One-draw DWDSE estimate and its parameter gradient.
pub fn dwdse_with_grad<M, T, R>(
    model: &M,
    x0: &[usize],
    spec: &TransitionSpec,
    schedule: &NoiseSchedule,
    sampler: &T,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)>
where
    M: TrainableScore + ?Sized,
    T: TimeSampler + ?Sized,
    R: Rng + ?Sized,
{
    let (t, iw) = sampler.draw(rng);
    let sb = schedule.sigma_bar_unchecked(t);
    let scale = iw * schedule.sigma_unchecked(t);
    let xt: Vec<usize> = x0
        .iter()
        .map(|&a| spec.sample_forward_unchecked(sb, a, rng))
        .collect();
    let mut grad = vec![0.0; model.params().len()];
    if spec.is_absorbing() && !xt.contains(&spec.n) {
        return Ok((0.0, grad));
    }
    let ev = model.eval(&xt, sb)?;
    let mut up = vec![0.0; xt.len() * spec.num_states()];
    let v = dse_pair_terms(&ev, x0, &xt, spec, sb, &RateWeights(*spec), Some((&mut up, scale)))?;
    if !v.is_finite() {
        return Ok((v, grad));
    }
    model.accumulate_grad(&xt, sb, &up, &mut grad)?;
    Ok((scale * v, grad))
}

/// `Σ_i KL(p_{1|0}(·|x0_i) ‖ π)`, exactly; `+∞` when `π` misses reachable
/// states.
pub fn prior_kl(x0: &[usize], spec: &TransitionSpec, schedule: &NoiseSchedule, leakage: f64) -> Result<f64> {
    prior_kl_at(x0, spec, schedule.sigma_bar(1.0)?, leakage)
}

/// [`prior_kl`] at an explicit terminal total noise.
pub fn prior_kl_at(x0: &[usize], spec: &TransitionSpec, sigma_bar: f64, leakage: f64) -> Result<f64> {
    let pi = StationaryDist::new(spec, leakage)?;
    let mut total = 0.0;
    for &x in x0 {
        let col = spec.transition_column(sigma_bar, x)?;
        total += kl_divergence(&col, pi.probs())?;
    }
    Ok(total)
}
