//! Brute-force references over fully enumerated state spaces.
//!
//! Everything here is deliberately naive and is what the fast paths in
//! [`process`](crate::process), [`losses`](crate::losses) and
//! [`samplers`](crate::samplers) get checked against.
//!
//! Sequences are encoded mixed-radix, most-significant position first:
//! `index = Σ_i x_i · n^(d-1-i)`. Every oracle and test shares this layout.

use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::losses::{k_const_unchecked, PairWeights};
use crate::process::{check_sigma_bar, NoiseSchedule, TransitionSpec};
use crate::scores::{ScoreEval, ScoreLayout, ScoreModel, MIN_LOG_SCORE};

/// Largest enumerated sequence space.
pub const MAX_ENUMERATED: usize = 1 << 20;
/// Largest matrix handed to [`dense_expm`].
pub const MAX_DENSE_DIM: usize = 4096;
/// Largest state space for [`exact_reverse_solve`].
pub const MAX_REVERSE_STATES: usize = 4096;

/// Number of sequences in `{0..n}^d`, or `None` on overflow.
pub fn space_size(num_states: usize, seq_len: usize) -> Option<usize> {
    let mut size = 1usize;
    for _ in 0..seq_len {
        size = size.checked_mul(num_states)?;
    }
    Some(size)
}

pub fn encode_sequence(seq: &[usize], num_states: usize) -> usize {
    seq.iter().fold(0, |acc, &x| acc * num_states + x)
}

pub fn decode_sequence(mut index: usize, num_states: usize, seq_len: usize) -> Vec<usize> {
    let mut seq = vec![0; seq_len];
    for slot in seq.iter_mut().rev() {
        *slot = index % num_states;
        index /= num_states;
    }
    seq
}

/// An explicit probability vector over every sequence in `{0..n}^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedDist {
    num_states: usize,
    seq_len: usize,
    probs: Vec<f64>,
}

impl EnumeratedDist {
    pub fn new(num_states: usize, seq_len: usize, probs: Vec<f64>) -> Result<Self> {
        let size = Self::check_capacity(num_states, seq_len)?;
        if probs.len() != size {
            return Err(Error::arg(format!(
                "expected {size} probabilities, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::arg("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::arg(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self {
            num_states,
            seq_len,
            probs,
        })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(num_states: usize, seq_len: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::arg("weights must have a positive finite sum"));
        }
        Self::new(num_states, seq_len, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(num_states: usize, seq_len: usize) -> Result<Self> {
        let size = Self::check_capacity(num_states, seq_len)?;
        Ok(Self {
            num_states,
            seq_len,
            probs: vec![1.0 / size as f64; size],
        })
    }

    pub fn point_mass(num_states: usize, seq: &[usize]) -> Result<Self> {
        let size = Self::check_capacity(num_states, seq.len())?;
        if seq.iter().any(|&x| x >= num_states) {
            return Err(Error::arg("token out of range"));
        }
        let mut probs = vec![0.0; size];
        probs[encode_sequence(seq, num_states)] = 1.0;
        Ok(Self {
            num_states,
            seq_len: seq.len(),
            probs,
        })
    }

    /// Product of independent per-position marginals, each over `num_states`.
    pub fn product(num_states: usize, marginals: &[Vec<f64>]) -> Result<Self> {
        let seq_len = marginals.len();
        let size = Self::check_capacity(num_states, seq_len)?;
        let probs = (0..size)
            .map(|idx| {
                decode_sequence(idx, num_states, seq_len)
                    .iter()
                    .zip(marginals)
                    .map(|(&x, m)| m[x])
                    .product()
            })
            .collect();
        Self::new(num_states, seq_len, probs)
    }

    fn check_capacity(num_states: usize, seq_len: usize) -> Result<usize> {
        match space_size(num_states, seq_len) {
            Some(size) if size <= MAX_ENUMERATED => Ok(size),
            Some(size) => Err(Error::Capacity {
                what: "enumerated sequence space",
                size,
                limit: MAX_ENUMERATED,
            }),
            None => Err(Error::Capacity {
                what: "enumerated sequence space",
                size: usize::MAX,
                limit: MAX_ENUMERATED,
            }),
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, seq: &[usize]) -> f64 {
        self.probs[encode_sequence(seq, self.num_states)]
    }

    pub fn sequence(&self, index: usize) -> Vec<usize> {
        decode_sequence(index, self.num_states, self.seq_len)
    }

    /// Marginal distribution of one position.
    pub fn marginal(&self, pos: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.num_states];
        for (idx, &p) in self.probs.iter().enumerate() {
            m[self.sequence(idx)[pos]] += p;
        }
        m
    }

    /// Re-embeds a distribution over ordinary tokens into a state space with
    /// extra (e.g. MASK) states that carry zero mass.
    pub fn embed(&self, num_states: usize) -> Result<Self> {
        if num_states < self.num_states {
            return Err(Error::arg("cannot embed into a smaller state space"));
        }
        let size = Self::check_capacity(num_states, self.seq_len)?;
        let mut probs = vec![0.0; size];
        for (idx, &p) in self.probs.iter().enumerate() {
            probs[encode_sequence(&self.sequence(idx), num_states)] = p;
        }
        Self::new(num_states, self.seq_len, probs)
    }

    /// Bayes posterior over all sequences consistent with `fixed`
    /// (position → token); other sequences get zero mass.
    pub fn condition(&self, fixed: &[(usize, usize)]) -> Result<Self> {
        let mut probs = self.probs.clone();
        for (idx, p) in probs.iter_mut().enumerate() {
            let seq = self.sequence(idx);
            if fixed.iter().any(|&(pos, tok)| seq[pos] != tok) {
                *p = 0.0;
            }
        }
        Self::from_weights(self.num_states, self.seq_len, probs)
    }
}

/// Dense square matrix, row-major. Used for rate matrices and for their
/// exponentials.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    dim: usize,
    data: Vec<f64>,
}

/// A dense generator: nonnegative off-diagonals, zero column sums.
pub type DenseRateMatrix = DenseMatrix;

impl DenseMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for r in 0..dim {
            for c in 0..dim {
                m.data[r * dim + c] = f(r, c);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    fn add_to(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.dim + col] += v;
    }

    /// True when this is a valid generator within `tol`.
    pub fn is_rate_matrix(&self, tol: f64) -> bool {
        (0..self.dim).all(|c| {
            let mut sum = 0.0;
            for r in 0..self.dim {
                let v = self.get(r, c);
                if r != c && v < -tol {
                    return false;
                }
                sum += v;
            }
            sum.abs() <= tol
        })
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|r| {
                self.data[r * self.dim..(r + 1) * self.dim]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn one_norm(&self) -> f64 {
        (0..self.dim)
            .map(|c| (0..self.dim).map(|r| self.get(r, c).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.get(r, col)).collect()
    }
}

/// Taylor degree used after scaling.
const EXPM_TAYLOR_DEGREE: usize = 18;

/// `exp(σ̄·M)` by scaling and squaring: the argument is halved until its
/// 1-norm is at most 1/2, a degree-18 Taylor polynomial is evaluated
/// (truncation error below 1e-22 at that norm), and the result is squared back.
pub fn dense_expm(m: &DenseMatrix, sigma_bar: f64) -> Result<DenseMatrix> {
    if m.dim > MAX_DENSE_DIM {
        return Err(Error::Capacity {
            what: "dense matrix",
            size: m.dim,
            limit: MAX_DENSE_DIM,
        });
    }
    if !sigma_bar.is_finite() {
        return Err(Error::arg("non-finite exponent scale"));
    }
    let a = m.scaled(sigma_bar);
    let norm = a.one_norm();
    let mut squarings = 0u32;
    while norm / f64::from(2u32).powi(squarings as i32) > 0.5 {
        squarings += 1;
    }
    let a = a.scaled(0.5f64.powi(squarings as i32));

    // Horner form: I + A(I + A/2(I + A/3(...)))
    let n = m.dim;
    let mut acc = DenseMatrix::identity(n);
    for k in (1..=EXPM_TAYLOR_DEGREE).rev() {
        acc = a.matmul(&acc).scaled(1.0 / k as f64);
        for i in 0..n {
            acc.add_to(i, i, 1.0);
        }
    }
    for _ in 0..squarings {
        acc = acc.matmul(&acc);
    }
    Ok(acc)
}

/// Dense generator of the whole sequence space: the Kronecker sum
/// `Σ_i I ⊗ … ⊗ Q ⊗ … ⊗ I` with `Q` acting on position `i`.
pub fn sequence_generator(spec: &TransitionSpec, seq_len: usize) -> Result<DenseMatrix> {
    let m = spec.num_states();
    let size = space_size(m, seq_len)
        .filter(|&s| s <= MAX_DENSE_DIM)
        .ok_or(Error::Capacity {
            what: "sequence generator",
            size: space_size(m, seq_len).unwrap_or(usize::MAX),
            limit: MAX_DENSE_DIM,
        })?;
    let mut g = DenseMatrix::zeros(size);
    for src in 0..size {
        let x = decode_sequence(src, m, seq_len);
        for i in 0..seq_len {
            let mut y = x.clone();
            for tok in 0..m {
                y[i] = tok;
                g.add_to(encode_sequence(&y, m), src, spec.rate_unchecked(tok, x[i]));
            }
        }
    }
    Ok(g)
}

/// Applies a single-token linear map along one axis of a sequence-space vector.
fn apply_along_axis(
    v: &[f64],
    num_states: usize,
    seq_len: usize,
    axis: usize,
    map: impl Fn(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let stride = num_states.pow((seq_len - 1 - axis) as u32);
    let block = stride * num_states;
    let mut out = vec![0.0; v.len()];
    let mut fiber = vec![0.0; num_states];
    for start in (0..v.len()).step_by(block) {
        for offset in 0..stride {
            for (k, f) in fiber.iter_mut().enumerate() {
                *f = v[start + offset + k * stride];
            }
            let mapped = map(&fiber);
            for (k, val) in mapped.into_iter().enumerate() {
                out[start + offset + k * stride] = val;
            }
        }
    }
    out
}

/// Exact `p_t` from `p_0` by applying the token kernel along every axis.
pub fn evolve(p0: &EnumeratedDist, spec: &TransitionSpec, sigma_bar: f64) -> Result<EnumeratedDist> {
    check_sigma_bar(sigma_bar)?;
    if p0.num_states != spec.num_states() {
        return Err(Error::arg(format!(
            "distribution has {} states per token, process has {}",
            p0.num_states,
            spec.num_states()
        )));
    }
    let mut v = p0.probs.clone();
    for axis in 0..p0.seq_len {
        v = apply_along_axis(&v, p0.num_states, p0.seq_len, axis, |f| {
            spec.apply_kernel(sigma_bar, f)
        });
    }
    Ok(EnumeratedDist {
        num_states: p0.num_states,
        seq_len: p0.seq_len,
        probs: v,
    })
}

/// Exact Hamming-1 ratios `p(x with y at i) / p(x)`, row-major `d × n`.
/// The self entry of every row is 1.
pub fn exact_concrete_score(p: &EnumeratedDist, seq: &[usize]) -> Result<Vec<f64>> {
    if seq.len() != p.seq_len || seq.iter().any(|&x| x >= p.num_states) {
        return Err(Error::arg("sequence does not match the distribution's space"));
    }
    let base = p.prob(seq);
    if !(base > 0.0) {
        return Err(Error::UndefinedScore(format!(
            "sequence {seq:?} has zero probability"
        )));
    }
    let n = p.num_states;
    let mut out = vec![0.0; p.seq_len * n];
    let mut y = seq.to_vec();
    for i in 0..p.seq_len {
        for tok in 0..n {
            y[i] = tok;
            out[i * n + tok] = if tok == seq[i] { 1.0 } else { p.prob(&y) / base };
        }
        y[i] = seq[i];
    }
    Ok(out)
}

/// Total variation distance between two probability vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::arg("dimension mismatch"));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `KL(p ‖ q)` with `0·log 0 = 0`; `+∞` when `p` has mass outside `q`'s support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::arg("dimension mismatch"));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl)
}

/// Central-difference gradient `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h`.
pub fn finite_difference_grad(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + h;
            let up = f(&probe);
            probe[i] = theta[i] - h;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Score model backed by the exact marginals of a known data distribution.
///
/// `p_t` is recomputed by [`evolve`] per distinct noise level and the most
/// recent one is cached, which keeps full-space sweeps at one evolve each.
pub struct ExactScoreModel {
    p0: EnumeratedDist,
    spec: TransitionSpec,
    layout: ScoreLayout,
    cache: Mutex<Option<(u64, std::sync::Arc<EnumeratedDist>)>>,
}

impl ExactScoreModel {
    /// `p_data` may be given over ordinary tokens only; it is embedded into
    /// the process state space.
    pub fn new(p_data: &EnumeratedDist, spec: TransitionSpec) -> Result<Self> {
        let p0 = p_data.embed(spec.num_states())?;
        Ok(Self {
            layout: ScoreLayout::new(spec.num_states(), p0.seq_len(), spec.mask()),
            p0,
            spec,
            cache: Mutex::new(None),
        })
    }

    pub fn data(&self) -> &EnumeratedDist {
        &self.p0
    }

    /// Marginal `p_t` at total noise `σ̄`.
    pub fn marginal_at(&self, sigma_bar: f64) -> Result<std::sync::Arc<EnumeratedDist>> {
        let key = sigma_bar.to_bits();
        let mut guard = self.cache.lock().expect("score cache poisoned");
        if let Some((k, p)) = guard.as_ref() {
            if *k == key {
                return Ok(p.clone());
            }
        }
        let p = std::sync::Arc::new(evolve(&self.p0, &self.spec, sigma_bar)?);
        *guard = Some((key, p.clone()));
        Ok(p)
    }
}

impl ScoreModel for ExactScoreModel {
    fn num_states(&self) -> usize {
        self.layout.num_states
    }

    fn seq_len(&self) -> usize {
        self.layout.seq_len
    }

    fn eval(&self, seq: &[usize], sigma_bar: f64) -> Result<ScoreEval> {
        self.layout.check(seq)?;
        let pt = self.marginal_at(sigma_bar)?;
        let ratios = exact_concrete_score(&pt, seq)?;
        let logs = ratios
            .into_iter()
            .map(|r| if r > 0.0 { r.ln().max(MIN_LOG_SCORE) } else { MIN_LOG_SCORE })
            .collect();
        Ok(self.layout.finish(seq, logs, sigma_bar))
    }
}

/// Options for [`exact_reverse_solve`].
#[derive(Debug, Clone, Copy)]
pub struct ReverseSolveOptions {
    /// RK4 steps, uniform in `log σ̄`.
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Leakage of the absorbing prior the integration starts from.
    pub leakage: f64,
}

impl ReverseSolveOptions {
    pub fn new(steps: usize, t_min: f64) -> Self {
        Self {
            steps,
            t_start: 1.0,
            t_end: t_min,
            leakage: crate::process::DEFAULT_LEAKAGE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReverseSolution {
    pub dist: EnumeratedDist,
    /// Total negative mass removed by clipping integration artifacts.
    pub clipped_mass: f64,
}

/// Integrates the parameterized reverse master equation over the full
/// sequence space, from the product prior at `t_start` down to `t_end`.
///
/// The integration variable is `log σ̄`, in which the reverse rates are
/// `σ̄ · s_θ(x)_{i,y} · Q(x_i, y)`; this keeps the stiffness near small noise
/// levels bounded for both transition kinds.
pub fn exact_reverse_solve<M: ScoreModel + ?Sized>(
    model: &M,
    spec: &TransitionSpec,
    schedule: &NoiseSchedule,
    seq_len: usize,
    opts: ReverseSolveOptions,
) -> Result<ReverseSolution> {
    let m = spec.num_states();
    if model.num_states() != m || model.seq_len() != seq_len {
        return Err(Error::arg("model does not match the process state space"));
    }
    let size = space_size(m, seq_len)
        .filter(|&s| s <= MAX_REVERSE_STATES)
        .ok_or(Error::Capacity {
            what: "reverse solve state space",
            size: space_size(m, seq_len).unwrap_or(usize::MAX),
            limit: MAX_REVERSE_STATES,
        })?;
    if opts.steps == 0 {
        return Err(Error::arg("reverse solve needs at least one step"));
    }
    let sb_start = schedule.sigma_bar(opts.t_start)?;
    let sb_end = schedule.sigma_bar(opts.t_end)?;
    if !(sb_end > 0.0) || sb_end > sb_start {
        return Err(Error::arg("reverse solve needs 0 < σ̄(t_end) <= σ̄(t_start)"));
    }

    let pi = spec.stationary(opts.leakage)?;
    let marginals = vec![pi.probs().to_vec(); seq_len];
    let mut p = EnumeratedDist::product(m, &marginals)?.probs;

    let states: Vec<Vec<usize>> = (0..size).map(|i| decode_sequence(i, m, seq_len)).collect();
    // Reverse generator applied to v at noise level u, times u.
    let drift = |u: f64, v: &[f64]| -> Result<Vec<f64>> {
        let evals = crate::par_map(size, |idx| model.eval(&states[idx], u));
        let mut out = vec![0.0; size];
        for (idx, ev) in evals.into_iter().enumerate() {
            let ev = ev?;
            let mass = v[idx];
            if mass == 0.0 {
                continue;
            }
            let x = &states[idx];
            let mut y = x.clone();
            for i in 0..seq_len {
                for tok in 0..m {
                    if tok == x[i] {
                        continue;
                    }
                    let q = spec.rate_unchecked(x[i], tok);
                    if q == 0.0 {
                        continue;
                    }
                    let flow = u * q * ev.ratio(i, tok) * mass;
                    y[i] = tok;
                    out[encode_sequence(&y, m)] += flow;
                    out[idx] -= flow;
                }
                y[i] = x[i];
            }
        }
        Ok(out)
    };

    let (s0, s1) = (-sb_start.ln(), -sb_end.ln());
    let h = (s1 - s0) / opts.steps as f64;
    if h > 0.0 {
        for k in 0..opts.steps {
            let s = s0 + k as f64 * h;
            let u = |s: f64| (-s).exp();
            let k1 = drift(u(s), &p)?;
            let tmp: Vec<f64> = p.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
            let k2 = drift(u(s + 0.5 * h), &tmp)?;
            let tmp: Vec<f64> = p.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
            let k3 = drift(u(s + 0.5 * h), &tmp)?;
            let tmp: Vec<f64> = p.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
            let k4 = drift(u(s + h), &tmp)?;
            for i in 0..size {
                p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }

    let mut clipped = 0.0;
    for (state, v) in p.iter_mut().enumerate() {
        if *v < 0.0 {
            if *v < -1e-8 {
                return Err(Error::Instability { state, value: *v });
            }
            clipped -= *v;
            *v = 0.0;
        }
    }
    let dist = EnumeratedDist::from_weights(m, seq_len, p)?;
    Ok(ReverseSolution {
        dist,
        clipped_mass: clipped,
    })
}

/// Exact per-position posterior `p_{0|t}(x_0^i | x_t)` over ordinary tokens,
/// by enumeration. Returned row-major `d × n_tokens`.
pub fn exact_mean_posterior(
    p_data: &EnumeratedDist,
    spec: &TransitionSpec,
    sigma_bar: f64,
    x_t: &[usize],
) -> Result<Vec<f64>> {
    check_sigma_bar(sigma_bar)?;
    let n = spec.n;
    let d = p_data.seq_len();
    if p_data.num_states() != n || x_t.len() != d {
        return Err(Error::arg("data distribution must be over ordinary tokens"));
    }
    let mut post = vec![0.0; d * n];
    let mut total = 0.0;
    for (idx, &p) in p_data.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let x0 = p_data.sequence(idx);
        let like: f64 = x0
            .iter()
            .zip(x_t)
            .map(|(&a, &b)| spec.kernel_entry(sigma_bar, b, a))
            .product();
        let w = p * like;
        total += w;
        for (i, &tok) in x0.iter().enumerate() {
            post[i * n + tok] += w;
        }
    }
    if !(total > 0.0) {
        return Err(Error::UndefinedScore(format!("x_t = {x_t:?} is unreachable")));
    }
    post.iter_mut().for_each(|v| *v /= total);
    Ok(post)
}

/// Mean model that returns the exact posterior of a known distribution.
pub struct ExactMeanModel {
    p_data: EnumeratedDist,
    spec: TransitionSpec,
}

impl ExactMeanModel {
    /// `p_data` lives on ordinary tokens.
    pub fn new(p_data: &EnumeratedDist, spec: TransitionSpec) -> Result<Self> {
        if p_data.num_states() != spec.n {
            return Err(Error::arg("data distribution must be over ordinary tokens"));
        }
        Ok(Self {
            p_data: p_data.clone(),
            spec,
        })
    }
}

impl crate::scores::MeanModel for ExactMeanModel {
    fn posterior(&self, x_t: &[usize], sigma_bar: f64) -> Result<Vec<f64>> {
        exact_mean_posterior(&self.p_data, &self.spec, sigma_bar, x_t)
    }
}

/// Exact reverse transition over the full sequence space:
/// `p(y | x_t) = K_seq(x_t | y) p_prev(y) / p_t(x_t)` where `p_t` is `p_prev`
/// evolved by `σ̄`.
pub fn exact_reverse_kernel(
    p_prev: &EnumeratedDist,
    spec: &TransitionSpec,
    sigma_bar: f64,
    x_t: &[usize],
) -> Result<Vec<f64>> {
    check_sigma_bar(sigma_bar)?;
    let m = p_prev.num_states();
    let mut out: Vec<f64> = (0..p_prev.len())
        .map(|idx| {
            let y = p_prev.sequence(idx);
            let k: f64 = y
                .iter()
                .zip(x_t)
                .map(|(&a, &b)| spec.kernel_entry(sigma_bar, b, a))
                .product();
            k * p_prev.probs()[idx]
        })
        .collect();
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedScore(format!(
            "x_t = {x_t:?} has zero probability"
        )));
    }
    out.iter_mut().for_each(|v| *v /= total);
    debug_assert_eq!(out.len(), space_size(m, x_t.len()).unwrap());
    Ok(out)
}

/// Exact diffusion-weighted denoising score entropy: the `x_t` expectation is
/// enumerated and the time integral, written as `∫ f(σ̄) dσ̄`, is evaluated by
/// composite Gauss–Legendre quadrature in `log σ̄`.
pub fn exact_dwdse<M: ScoreModel + ?Sized>(
    model: &M,
    x0: &[usize],
    spec: &TransitionSpec,
    schedule: &NoiseSchedule,
    t_min: f64,
    panels: usize,
) -> Result<f64> {
    const NODES: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683,
        0.0,
        0.538_469_310_105_683,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.236_926_885_056_189,
        0.478_628_670_499_366,
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
    ];
    let m = spec.num_states();
    let d = x0.len();
    let size = space_size(m, d).ok_or(Error::arg("state space overflow"))?;
    let (a, b) = (
        schedule.sigma_bar(t_min)?.ln(),
        schedule.sigma_bar(1.0)?.ln(),
    );
    let width = (b - a) / panels as f64;
    let integrand = |u: f64| -> Result<f64> {
        let mut total = 0.0;
        for idx in 0..size {
            let xt = decode_sequence(idx, m, d);
            let cond: f64 = xt
                .iter()
                .zip(x0)
                .map(|(&xt_i, &x0_i)| spec.kernel_entry(u, xt_i, x0_i))
                .product();
            if cond == 0.0 {
                continue;
            }
            let ev = model.eval(&xt, u)?;
            let mut inner = 0.0;
            for i in 0..d {
                let denom = spec.kernel_entry(u, xt[i], x0[i]);
                for y in 0..m {
                    let w = if y == xt[i] { 0.0 } else { spec.rate_unchecked(xt[i], y) };
                    if w == 0.0 {
                        continue;
                    }
                    let r = spec.kernel_entry(u, y, x0[i]) / denom;
                    let ls = ev.log_score(i, y).unwrap_or(MIN_LOG_SCORE);
                    inner += w * (ls.exp() - r * ls + k_const_unchecked(r));
                }
            }
            total += cond * inner;
        }
        Ok(total)
    };
    let mut acc = 0.0;
    for k in 0..panels {
        let mid = a + (k as f64 + 0.5) * width;
        for (node, wt) in NODES.iter().zip(WEIGHTS) {
            let lu = mid + 0.5 * width * node;
            let u = lu.exp();
            // dσ̄ = σ̄ d(log σ̄)
            acc += 0.5 * width * wt * u * integrand(u)?;
        }
    }
    Ok(acc)
}

/// Exact score entropy of `model` against `p` with arbitrary pair weights,
/// written out directly from its definition. Independent of the loss module's
/// accumulation path.
pub fn brute_force_score_entropy<M: ScoreModel + ?Sized, W: PairWeights + ?Sized>(
    model: &M,
    p: &EnumeratedDist,
    weights: &W,
    sigma_bar: f64,
) -> Result<f64> {
    let m = p.num_states();
    let mut total = 0.0;
    for idx in 0..p.len() {
        let px = p.probs()[idx];
        if px == 0.0 {
            continue;
        }
        let x = p.sequence(idx);
        let ev = model.eval(&x, sigma_bar)?;
        for i in 0..x.len() {
            for y in 0..m {
                if y == x[i] || ev.is_excluded(i, y) {
                    continue;
                }
                let mut z = x.clone();
                z[i] = y;
                let a = p.prob(&z) / px;
                let s = ev.ratio(i, y);
                total += px * weights.weight(&x, i, y) * (s - a * s.ln() + k_const_unchecked(a));
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::TransitionSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut ChaCha8Rng, m: usize, d: usize) -> EnumeratedDist {
        let size = space_size(m, d).unwrap();
        let w: Vec<f64> = (0..size).map(|_| rng.random::<f64>() + 0.05).collect();
        EnumeratedDist::from_weights(m, d, w).unwrap()
    }

    #[test]
    fn encoding_is_most_significant_first() {
        assert_eq!(encode_sequence(&[1, 0, 2], 3), 9 + 2);
        assert_eq!(decode_sequence(11, 3, 3), vec![1, 0, 2]);
        for idx in 0..81 {
            assert_eq!(encode_sequence(&decode_sequence(idx, 3, 4), 3), idx);
        }
    }

    #[test]
    fn capacity_is_enforced() {
        assert!(matches!(
            EnumeratedDist::uniform(2, 21),
            Err(Error::Capacity { .. })
        ));
        assert!(EnumeratedDist::uniform(2, 20).is_ok());
        assert!(matches!(
            dense_expm(&DenseMatrix::zeros(MAX_DENSE_DIM + 1), 1.0),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn rejects_invalid_distribution() {
        assert!(EnumeratedDist::new(2, 1, vec![0.5, 0.6]).is_err());
        assert!(EnumeratedDist::new(2, 1, vec![-0.1, 1.1]).is_err());
        assert!(EnumeratedDist::new(2, 2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn expm_zero_is_identity() {
        let q = sequence_generator(&TransitionSpec::uniform(3), 2).unwrap();
        let e = dense_expm(&q, 0.0).unwrap();
        assert_eq!(e, DenseMatrix::identity(9));
    }

    #[test]
    fn expm_columns_are_stochastic() {
        let spec = TransitionSpec::absorbing(3);
        let q = sequence_generator(&spec, 2).unwrap();
        assert!(q.is_rate_matrix(1e-14));
        for sb in [0.01, 1.0, 7.5, 40.0] {
            let e = dense_expm(&q, sb).unwrap();
            for c in 0..e.dim() {
                let sum: f64 = e.column(c).iter().sum();
                assert!((sum - 1.0).abs() < 1e-10, "σ̄={sb} col {c}: {sum}");
            }
        }
    }

    #[test]
    fn expm_matches_two_state_closed_form() {
        // Independent of the process module: for Q = [[-a, b], [a, -b]],
        // exp(Q)_00 = (b + a e^{-(a+b)}) / (a + b).
        let (a, b) = (0.7, 0.2);
        let q = DenseMatrix::from_fn(2, |r, c| match (r, c) {
            (0, 0) => -a,
            (1, 0) => a,
            (0, 1) => b,
            _ => -b,
        });
        let e = dense_expm(&q, 2.0).unwrap();
        let want = (b + a * (-(a + b) * 2.0f64).exp()) / (a + b);
        assert!((e.get(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn evolve_identity_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p0 = random_dist(&mut rng, 4, 3);
        let p = evolve(&p0, &TransitionSpec::uniform(4), 0.0).unwrap();
        for (a, b) in p.probs().iter().zip(p0.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn evolve_single_position_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [TransitionSpec::uniform(5), TransitionSpec::absorbing(4)] {
            let p0 = random_dist(&mut rng, spec.num_states(), 1);
            let q = sequence_generator(&spec, 1).unwrap();
            let dense = dense_expm(&q, 0.9).unwrap().matvec(p0.probs());
            let fast = evolve(&p0, &spec, 0.9).unwrap();
            assert!(tv_distance(&dense, fast.probs()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn evolve_matches_kronecker_sum_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (TransitionSpec::uniform(2), 2usize),
            (TransitionSpec::uniform(2), 3),
            (TransitionSpec::absorbing(2), 2),
            (TransitionSpec::uniform(3), 2),
        ];
        for (spec, d) in cases {
            let p0 = random_dist(&mut rng, spec.num_states(), d);
            let g = sequence_generator(&spec, d).unwrap();
            let dense = dense_expm(&g, 0.7).unwrap().matvec(p0.probs());
            let fast = evolve(&p0, &spec, 0.7).unwrap();
            for (a, b) in dense.iter().zip(fast.probs()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn evolve_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in [TransitionSpec::uniform(3), TransitionSpec::absorbing(3)] {
            let p0 = random_dist(&mut rng, spec.num_states(), 3);
            let twice = evolve(&evolve(&p0, &spec, 0.4).unwrap(), &spec, 1.1).unwrap();
            let once = evolve(&p0, &spec, 1.5).unwrap();
            assert!(tv_distance(twice.probs(), once.probs()).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn scores_flatten_under_heavy_uniform_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = TransitionSpec::uniform(3);
        let p0 = random_dist(&mut rng, 3, 2);
        let pt = evolve(&p0, &spec, 50.0).unwrap();
        let flat = EnumeratedDist::uniform(3, 2).unwrap();
        assert!(tv_distance(pt.probs(), flat.probs()).unwrap() <= 1e-6);
        for idx in 0..pt.len() {
            for r in exact_concrete_score(&pt, &pt.sequence(idx)).unwrap() {
                assert!((r - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn concrete_score_examples() {
        let flat = EnumeratedDist::uniform(3, 2).unwrap();
        assert!(exact_concrete_score(&flat, &[1, 2])
            .unwrap()
            .iter()
            .all(|&r| (r - 1.0).abs() < 1e-15));

        let p = EnumeratedDist::new(2, 1, vec![0.9, 0.1]).unwrap();
        let s = exact_concrete_score(&p, &[0]).unwrap();
        assert!((s[1] - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(s[0], 1.0);

        let p = EnumeratedDist::new(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            exact_concrete_score(&p, &[1]),
            Err(Error::UndefinedScore(_))
        ));
    }

    #[test]
    fn concrete_score_reciprocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_dist(&mut rng, 4, 2);
        for idx in 0..p.len() {
            let x = p.sequence(idx);
            let sx = exact_concrete_score(&p, &x).unwrap();
            for i in 0..2 {
                for y in 0..4 {
                    let mut z = x.clone();
                    z[i] = y;
                    let sz = exact_concrete_score(&p, &z).unwrap();
                    assert!((sx[i * 4 + y] * sz[i * 4 + x[i]] - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tv_and_kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn finite_differences_examples() {
        let quad = |t: &[f64]| 3.0 * t[0] * t[0] - 2.0 * t[0] * t[1] + 0.5 * t[1];
        let g = finite_difference_grad(quad, &[0.4, -1.2], 1e-4);
        assert!((g[0] - (6.0 * 0.4 + 2.4)).abs() < 1e-10);
        assert!((g[1] - (-0.8 + 0.5)).abs() < 1e-10);

        // single score entropy term in s: d/ds [s - a log s] = 1 - a/s
        let a = 0.3;
        let se = |t: &[f64]| t[0] - a * t[0].ln();
        let g = finite_difference_grad(se, &[0.8], 1e-4);
        assert!((g[0] - (1.0 - a / 0.8)).abs() < 1e-8);

        let f = |t: &[f64]| t[0].sin() * t[1];
        let h = |t: &[f64]| t[0].exp() + t[1] * t[1];
        let th = [0.3, 0.7];
        let sum = finite_difference_grad(|t| f(t) + h(t), &th, 1e-4);
        let (gf, gh) = (
            finite_difference_grad(f, &th, 1e-4),
            finite_difference_grad(h, &th, 1e-4),
        );
        for i in 0..2 {
            assert!((sum[i] - gf[i] - gh[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn reverse_solve_from_prior_with_zero_time_is_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = TransitionSpec::uniform(3);
        let model = ExactScoreModel::new(&random_dist(&mut rng, 3, 2), spec).unwrap();
        let opts = ReverseSolveOptions {
            steps: 5,
            t_start: 0.5,
            t_end: 0.5,
            leakage: 0.0,
        };
        let sol = exact_reverse_solve(&model, &spec, &NoiseSchedule::default(), 2, opts).unwrap();
        let flat = EnumeratedDist::uniform(3, 2).unwrap();
        assert!(tv_distance(sol.dist.probs(), flat.probs()).unwrap() < 1e-15);
    }

    #[test]
    fn reverse_solve_with_exact_scores_recovers_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sched = NoiseSchedule::default();
        for spec in [TransitionSpec::uniform(3), TransitionSpec::absorbing(3)] {
            let p_data = random_dist(&mut rng, 3, 2);
            let model = ExactScoreModel::new(&p_data, spec).unwrap();
            let sol =
                exact_reverse_solve(&model, &spec, &sched, 2, ReverseSolveOptions::new(400, 1e-3))
                    .unwrap();
            let target = p_data.embed(spec.num_states()).unwrap();
            let tv = tv_distance(sol.dist.probs(), target.probs()).unwrap();
            assert!(tv <= 1e-3, "{:?}: tv {tv}", spec.kind);
        }
    }

    #[test]
    fn reverse_solve_converges_at_fourth_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = TransitionSpec::uniform(3);
        let sched = NoiseSchedule::geometric(1e-2, 5.0);
        let model = ExactScoreModel::new(&random_dist(&mut rng, 3, 2), spec).unwrap();
        let solve = |steps| {
            exact_reverse_solve(&model, &spec, &sched, 2, ReverseSolveOptions::new(steps, 0.05))
                .unwrap()
                .dist
        };
        let (a, b, c) = (solve(20), solve(40), solve(80));
        let e1 = tv_distance(a.probs(), b.probs()).unwrap();
        let e2 = tv_distance(b.probs(), c.probs()).unwrap();
        assert!(e2 < e1, "{e1:e} -> {e2:e}");
        let order = (e1 / e2).log2();
        assert!(order > 3.3, "observed order {order}");
    }

    #[test]
    fn mean_posterior_and_reverse_kernel_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = TransitionSpec::absorbing(3);
        let p = random_dist(&mut rng, 3, 2);
        let post = exact_mean_posterior(&p, &spec, 0.6, &[3, 1]).unwrap();
        for row in post.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // unmasked position is known exactly
        assert!((post[3 + 1] - 1.0).abs() < 1e-12);

        let prev = p.embed(4).unwrap();
        let k = exact_reverse_kernel(&prev, &spec, 0.6, &[3, 1]).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
