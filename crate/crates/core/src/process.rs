//! Forward noising process: structured rate matrices, noise schedules and
//! closed-form transition kernels.
//!
//! Rates follow the column convention: `rate(dest, src)` is the jump rate
//! from `src` to `dest`, so each column of the implied dense matrix sums to
//! zero and `p_{t|0}(· | x)` is column `x` of `exp(σ̄(t)·Q)`.
//!
//! For the absorbing process the MASK state is the last index (`n`), so
//! ordinary token ids mean the same thing under both transition kinds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower end of the time domain.
pub const DEFAULT_T_MIN: f64 = 1e-3;
/// Default probability mass the absorbing prior leaks onto ordinary tokens.
pub const DEFAULT_LEAKAGE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionKind {
    Uniform,
    Absorbing,
}

/// A structured generator `Q`, never stored densely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub kind: TransitionKind,
    /// Number of ordinary tokens.
    pub n: usize,
    /// Multiplier applied to the base matrix.
    pub scale: f64,
}

impl TransitionSpec {
    /// Uniform process scaled down by `1/n`.
    pub fn uniform(n: usize) -> Self {
        Self {
            kind: TransitionKind::Uniform,
            n,
            scale: 1.0 / n as f64,
        }
    }

    pub fn absorbing(n: usize) -> Self {
        Self {
            kind: TransitionKind::Absorbing,
            n,
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::arg(format!("token count must be >= 2, got {}", self.n)));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::arg(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Size of the single-token state space (`n + 1` when absorbing).
    pub fn num_states(&self) -> usize {
        match self.kind {
            TransitionKind::Uniform => self.n,
            TransitionKind::Absorbing => self.n + 1,
        }
    }

    pub fn is_absorbing(&self) -> bool {
        self.kind == TransitionKind::Absorbing
    }

    /// Index of the MASK state, if the process has one.
    pub fn mask(&self) -> Option<usize> {
        match self.kind {
            TransitionKind::Uniform => None,
            TransitionKind::Absorbing => Some(self.n),
        }
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.num_states() {
            return Err(Error::arg(format!(
                "state {s} out of range for {} states",
                self.num_states()
            )));
        }
        Ok(())
    }

    /// Dense-matrix entry `Q(dest, src)`, the jump rate `src → dest`.
    pub fn rate(&self, dest: usize, src: usize) -> Result<f64> {
        self.check_state(dest)?;
        self.check_state(src)?;
        Ok(self.rate_unchecked(dest, src))
    }

    pub(crate) fn rate_unchecked(&self, dest: usize, src: usize) -> f64 {
        let n = self.n as f64;
        match self.kind {
            TransitionKind::Uniform => {
                if dest == src {
                    self.scale * (1.0 - n)
                } else {
                    self.scale
                }
            }
            TransitionKind::Absorbing => {
                let mask = self.n;
                if src == mask {
                    0.0
                } else if dest == src {
                    -self.scale
                } else if dest == mask {
                    self.scale
                } else {
                    0.0
                }
            }
        }
    }

    /// Exponent of the decay factor: the kernel is built from `exp(-c)`.
    fn decay_exponent(&self, sigma_bar: f64) -> f64 {
        match self.kind {
            TransitionKind::Uniform => sigma_bar * self.scale * self.n as f64,
            TransitionKind::Absorbing => sigma_bar * self.scale,
        }
    }

    /// `exp(σ̄·Q)(dest, src)`, the probability of being at `dest` after total
    /// noise `σ̄` when starting from `src`.
    pub fn transition_prob(&self, sigma_bar: f64, dest: usize, src: usize) -> Result<f64> {
        check_sigma_bar(sigma_bar)?;
        self.check_state(dest)?;
        self.check_state(src)?;
        Ok(self.kernel_entry(sigma_bar, dest, src))
    }

    /// Kernel entry without validation; `sigma_bar` may be negative, which
    /// yields the inverse kernel `exp(-|σ̄|·Q)`.
    pub(crate) fn kernel_entry(&self, sigma_bar: f64, dest: usize, src: usize) -> f64 {
        let c = self.decay_exponent(sigma_bar);
        match self.kind {
            TransitionKind::Uniform => {
                let keep = (-c).exp();
                // -expm1(-c) = 1 - e^{-c} without cancellation for small c
                let spread = -(-c).exp_m1() / self.n as f64;
                if dest == src {
                    keep + spread
                } else {
                    spread
                }
            }
            TransitionKind::Absorbing => {
                let mask = self.n;
                if src == mask {
                    if dest == mask {
                        1.0
                    } else {
                        0.0
                    }
                } else if dest == src {
                    (-c).exp()
                } else if dest == mask {
                    -(-c).exp_m1()
                } else {
                    0.0
                }
            }
        }
    }

    /// Column `src` of the forward kernel.
    pub fn transition_column(&self, sigma_bar: f64, src: usize) -> Result<Vec<f64>> {
        check_sigma_bar(sigma_bar)?;
        self.check_state(src)?;
        Ok((0..self.num_states())
            .map(|dest| self.kernel_entry(sigma_bar, dest, src))
            .collect())
    }

    /// Computes `exp(σ̄·Q)·v` in `O(num_states)`.
    pub fn apply_kernel(&self, sigma_bar: f64, v: &[f64]) -> Vec<f64> {
        self.apply_exp(sigma_bar, v)
    }

    /// Computes `exp(-σ̄·Q)·v`, the inverse kernel applied to `v`.
    pub fn apply_inverse_kernel(&self, sigma_bar: f64, v: &[f64]) -> Vec<f64> {
        self.apply_exp(-sigma_bar, v)
    }

    fn apply_exp(&self, sigma_bar: f64, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.num_states());
        let c = self.decay_exponent(sigma_bar);
        let keep = (-c).exp();
        let leave = -(-c).exp_m1();
        match self.kind {
            TransitionKind::Uniform => {
                let mean = v.iter().sum::<f64>() / self.n as f64;
                v.iter().map(|&x| keep * x + leave * mean).collect()
            }
            TransitionKind::Absorbing => {
                let mask = self.n;
                let mut out: Vec<f64> = v.iter().map(|&x| keep * x).collect();
                let moved: f64 = v[..mask].iter().sum::<f64>() * leave;
                out[mask] = v[mask] + moved;
                out
            }
        }
    }

    /// Draws a state from column `src` of the forward kernel.
    pub fn sample_forward<R: Rng + ?Sized>(
        &self,
        sigma_bar: f64,
        src: usize,
        rng: &mut R,
    ) -> Result<usize> {
        check_sigma_bar(sigma_bar)?;
        self.check_state(src)?;
        Ok(self.sample_forward_unchecked(sigma_bar, src, rng))
    }

    pub(crate) fn sample_forward_unchecked<R: Rng + ?Sized>(
        &self,
        sigma_bar: f64,
        src: usize,
        rng: &mut R,
    ) -> usize {
        let u: f64 = rng.random();
        let c = self.decay_exponent(sigma_bar);
        let keep = (-c).exp();
        match self.kind {
            TransitionKind::Uniform => {
                if u < keep {
                    src
                } else {
                    rng.random_range(0..self.n)
                }
            }
            TransitionKind::Absorbing => {
                if src == self.n || u < keep {
                    src
                } else {
                    self.n
                }
            }
        }
    }

    /// The limiting distribution; `leakage` spreads mass over ordinary tokens
    /// for the absorbing process and is ignored for the uniform one.
    pub fn stationary(&self, leakage: f64) -> Result<StationaryDist> {
        StationaryDist::new(self, leakage)
    }
}

pub(crate) fn check_sigma_bar(sigma_bar: f64) -> Result<()> {
    if !(sigma_bar >= 0.0) || sigma_bar.is_infinite() {
        return Err(Error::arg(format!(
            "total noise must be finite and nonnegative, got {sigma_bar}"
        )));
    }
    Ok(())
}

/// Limiting distribution `π` of a transition spec.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDist {
    probs: Vec<f64>,
}

impl StationaryDist {
    pub fn new(spec: &TransitionSpec, leakage: f64) -> Result<Self> {
        spec.validate()?;
        let probs = match spec.kind {
            TransitionKind::Uniform => vec![1.0 / spec.n as f64; spec.n],
            TransitionKind::Absorbing => {
                if !(0.0..1.0).contains(&leakage) {
                    return Err(Error::arg(format!("leakage must lie in [0, 1), got {leakage}")));
                }
                let mut p = vec![leakage / spec.n as f64; spec.n + 1];
                p[spec.n] = 1.0 - leakage;
                p
            }
        };
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, state: usize) -> f64 {
        self.probs[state]
    }
}

/// Total-noise schedule `σ̄(t)` on `t ∈ [0, 1]` together with its rate `σ(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSchedule {
    Geometric { sigma_min: f64, sigma_max: f64 },
    LogLinear { eps: f64 },
}

impl NoiseSchedule {
    pub fn geometric(sigma_min: f64, sigma_max: f64) -> Self {
        NoiseSchedule::Geometric {
            sigma_min,
            sigma_max,
        }
    }

    pub fn log_linear(eps: f64) -> Self {
        NoiseSchedule::LogLinear { eps }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSchedule::Geometric {
                sigma_min,
                sigma_max,
            } => {
                if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
                    return Err(Error::arg(format!(
                        "geometric schedule needs 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
                    )));
                }
            }
            NoiseSchedule::LogLinear { eps } => {
                if !(eps > 0.0 && eps < 1.0) {
                    return Err(Error::arg(format!("log-linear eps must lie in (0, 1), got {eps}")));
                }
            }
        }
        Ok(())
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::arg(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Total noise accumulated by time `t`.
    pub fn sigma_bar(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.sigma_bar_unchecked(t))
    }

    /// Instantaneous noise rate `dσ̄/dt`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_bar_unchecked(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Geometric {
                sigma_min,
                sigma_max,
            } => sigma_min.powf(1.0 - t) * sigma_max.powf(t),
            NoiseSchedule::LogLinear { eps } => -(-(1.0 - eps) * t).ln_1p(),
        }
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Geometric {
                sigma_min,
                sigma_max,
            } => self.sigma_bar_unchecked(t) * (sigma_max / sigma_min).ln(),
            NoiseSchedule::LogLinear { eps } => (1.0 - eps) / (1.0 - (1.0 - eps) * t),
        }
    }

    /// Noise accumulated between `t - dt` and `t`.
    pub fn sigma_bar_increment(&self, t: f64, dt: f64) -> Result<f64> {
        Self::check_t(t)?;
        Self::check_t(t - dt)?;
        Ok(self.sigma_bar_unchecked(t) - self.sigma_bar_unchecked(t - dt))
    }

    /// Inverse of `σ̄(t)` on `[0, 1]`.
    pub fn time_at(&self, sigma_bar: f64) -> Result<f64> {
        let (lo, hi) = (self.sigma_bar_unchecked(0.0), self.sigma_bar_unchecked(1.0));
        let tol = 1e-12 * hi;
        if !(lo - tol..=hi + tol).contains(&sigma_bar) {
            return Err(Error::arg(format!(
                "total noise {sigma_bar} outside the schedule range [{lo}, {hi}]"
            )));
        }
        let t = match *self {
            NoiseSchedule::Geometric {
                sigma_min,
                sigma_max,
            } => (sigma_bar / sigma_min).ln() / (sigma_max / sigma_min).ln(),
            NoiseSchedule::LogLinear { eps } => -(-sigma_bar).exp_m1() / (1.0 - eps),
        };
        Ok(t.clamp(0.0, 1.0))
    }
}

/// Everything that defines the forward process of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diffusion {
    pub process: TransitionSpec,
    pub schedule: NoiseSchedule,
    /// Mass the absorbing prior puts on ordinary tokens.
    pub leakage: f64,
    /// Smallest time visited by training, sampling and evaluation.
    pub t_min: f64,
}

impl Diffusion {
    pub fn new(process: TransitionSpec, schedule: NoiseSchedule) -> Self {
        Self {
            process,
            schedule,
            leakage: DEFAULT_LEAKAGE,
            t_min: DEFAULT_T_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.process.validate()?;
        self.schedule.validate()?;
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::arg(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        if !(0.0..1.0).contains(&self.leakage) {
            return Err(Error::arg(format!("leakage must lie in [0, 1), got {}", self.leakage)));
        }
        Ok(())
    }

    pub fn prior(&self) -> Result<StationaryDist> {
        StationaryDist::new(&self.process, self.leakage)
    }
}


impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::geometric(1e-4, 20.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_expm, DenseRateMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn densify(spec: &TransitionSpec) -> DenseRateMatrix {
        DenseRateMatrix::from_fn(spec.num_states(), |d, s| spec.rate(d, s).unwrap())
    }

    #[test]
    fn time_at_inverts_sigma_bar() {
        for sched in [NoiseSchedule::default(), NoiseSchedule::log_linear(1e-3)] {
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let back = sched.time_at(sched.sigma_bar(t).unwrap()).unwrap();
                assert!((back - t).abs() < 1e-10, "{sched:?} t={t} back={back}");
            }
            assert!(sched.time_at(1e9).is_err());
        }
    }

    #[test]
    fn uniform_rate_entries() {
        let spec = TransitionSpec::uniform(4);
        assert!((spec.rate(1, 0).unwrap() - 0.25).abs() < 1e-15);
        assert!((spec.rate(2, 2).unwrap() + 0.75).abs() < 1e-15);
    }

    #[test]
    fn absorbing_rate_entries() {
        let spec = TransitionSpec::absorbing(4);
        assert_eq!(spec.rate(4, 2).unwrap(), 1.0);
        assert_eq!(spec.rate(2, 4).unwrap(), 0.0);
        assert_eq!(spec.rate(2, 2).unwrap(), -1.0);
        assert_eq!(spec.rate(1, 2).unwrap(), 0.0);
    }

    #[test]
    fn rate_rejects_out_of_range() {
        let spec = TransitionSpec::absorbing(4);
        assert!(matches!(spec.rate(5, 0), Err(Error::Argument(_))));
        assert!(matches!(TransitionSpec::uniform(3).rate(0, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn columns_sum_to_zero_and_offdiag_nonnegative() {
        for spec in [
            TransitionSpec::uniform(7),
            TransitionSpec::absorbing(6),
            TransitionSpec::uniform(5).with_scale(2.5),
        ] {
            let q = densify(&spec);
            for src in 0..spec.num_states() {
                let mut sum = 0.0;
                for dest in 0..spec.num_states() {
                    let r = q.get(dest, src);
                    if dest != src {
                        assert!(r >= 0.0);
                    }
                    sum += r;
                }
                assert!(sum.abs() < 1e-14, "column {src} sums to {sum}");
            }
        }
    }

    #[test]
    fn kernel_at_zero_is_identity() {
        for spec in [TransitionSpec::uniform(5), TransitionSpec::absorbing(5)] {
            for s in 0..spec.num_states() {
                for d in 0..spec.num_states() {
                    let want = if d == s { 1.0 } else { 0.0 };
                    assert_eq!(spec.transition_prob(0.0, d, s).unwrap(), want);
                }
            }
        }
    }

    #[test]
    fn two_state_uniform_at_ln2() {
        // Frozen from the dense series exponential of Q = [[-1/2, 1/2], [1/2, -1/2]].
        let spec = TransitionSpec::uniform(2);
        let sb = std::f64::consts::LN_2;
        let oracle = dense_expm(&densify(&spec), sb).unwrap();
        assert!((oracle.get(0, 0) - 0.75).abs() < 1e-10);
        assert!((spec.transition_prob(sb, 0, 0).unwrap() - 0.75).abs() < 1e-10);
        assert!((spec.transition_prob(sb, 1, 0).unwrap() - 0.25).abs() < 1e-10);
    }

    #[test]
    fn absorbing_half_masked_at_ln2() {
        let sb = std::f64::consts::LN_2;
        for n in [2, 5, 9] {
            let spec = TransitionSpec::absorbing(n);
            let oracle = dense_expm(&densify(&spec), sb).unwrap();
            assert!((oracle.get(n, 1) - 0.5).abs() < 1e-10);
            assert!((spec.transition_prob(sb, n, 1).unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn large_noise_reaches_stationary() {
        for spec in [TransitionSpec::uniform(6), TransitionSpec::absorbing(6)] {
            let pi = spec.stationary(0.0).unwrap();
            for src in 0..spec.num_states() {
                let col = spec.transition_column(50.0, src).unwrap();
                for (a, b) in col.iter().zip(pi.probs()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn negative_total_noise_rejected() {
        let spec = TransitionSpec::uniform(3);
        assert!(spec.transition_prob(-0.1, 0, 0).is_err());
        assert!(spec.transition_column(f64::NAN, 0).is_err());
    }

    #[test]
    fn closed_forms_match_dense_exponential() {
        let grid: Vec<f64> = (0..20).map(|k| 0.05 * 1.35f64.powi(k)).collect();
        for n in [2usize, 5, 30] {
            for spec in [TransitionSpec::uniform(n), TransitionSpec::absorbing(n)] {
                let q = densify(&spec);
                for &sb in &grid {
                    let dense = dense_expm(&q, sb).unwrap();
                    for s in 0..spec.num_states() {
                        for d in 0..spec.num_states() {
                            let err = (dense.get(d, s) - spec.transition_prob(sb, d, s).unwrap()).abs();
                            assert!(err <= 1e-8, "n={n} sb={sb} ({d},{s}) err={err:e}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn columns_are_distributions() {
        for spec in [TransitionSpec::uniform(9), TransitionSpec::absorbing(9)] {
            for sb in [0.0, 0.1, 1.0, 10.0] {
                for s in 0..spec.num_states() {
                    let col = spec.transition_column(sb, s).unwrap();
                    assert!(col.iter().all(|&p| p >= 0.0));
                    assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn chapman_kolmogorov() {
        for spec in [TransitionSpec::uniform(6), TransitionSpec::absorbing(6)] {
            let m = spec.num_states();
            let (a, b) = (0.37, 1.9);
            for src in 0..m {
                let mid = spec.transition_column(a, src).unwrap();
                let composed = spec.apply_kernel(b, &mid);
                let direct = spec.transition_column(a + b, src).unwrap();
                for (x, y) in composed.iter().zip(&direct) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn inverse_kernel_undoes_kernel() {
        for spec in [TransitionSpec::uniform(5), TransitionSpec::absorbing(5)] {
            let v: Vec<f64> = (0..spec.num_states()).map(|i| 0.3 + i as f64).collect();
            let back = spec.apply_inverse_kernel(1.3, &spec.apply_kernel(1.3, &v));
            for (x, y) in back.iter().zip(&v) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sample_forward_identity_at_zero_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = TransitionSpec::uniform(7);
        for src in 0..7 {
            for _ in 0..50 {
                assert_eq!(spec.sample_forward(0.0, src, &mut rng).unwrap(), src);
            }
        }
    }

    #[test]
    fn sample_forward_mask_frequency() {
        let spec = TransitionSpec::absorbing(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let masked = (0..draws)
            .filter(|_| spec.sample_forward(std::f64::consts::LN_2, 1, &mut rng).unwrap() == 4)
            .count();
        let freq = masked as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.01, "mask frequency {freq}");
    }

    #[test]
    fn sample_forward_matches_uniform_column() {
        let spec = TransitionSpec::uniform(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let col = spec.transition_column(0.8, 2).unwrap();
        let draws = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[spec.sample_forward(0.8, 2, &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&col) {
            let sd = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((*c as f64 / draws as f64 - p).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn sample_forward_is_seed_deterministic() {
        let spec = TransitionSpec::uniform(10);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64)
                .map(|_| spec.sample_forward(1.0, 3, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn geometric_endpoints() {
        let s = NoiseSchedule::geometric(1e-4, 20.0);
        assert!((s.sigma_bar(1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!((s.sigma_bar(0.0).unwrap() - 1e-4).abs() < 1e-18);
        assert!(s.sigma_bar(1.01).is_err());
        assert!(s.sigma(-0.5).is_err());
    }

    #[test]
    fn sigma_is_derivative_of_sigma_bar() {
        let h = 1e-5;
        for sched in [NoiseSchedule::log_linear(1e-3), NoiseSchedule::geometric(1e-4, 20.0)] {
            for t in [0.1, 0.5, 0.9] {
                let fd = (sched.sigma_bar(t + h).unwrap() - sched.sigma_bar(t - h).unwrap()) / (2.0 * h);
                let exact = sched.sigma(t).unwrap();
                let tol = if matches!(sched, NoiseSchedule::LogLinear { .. }) {
                    1e-6
                } else {
                    1e-6 * exact.max(1.0)
                };
                assert!((fd - exact).abs() <= tol, "{sched:?} t={t}: {fd} vs {exact}");
            }
        }
    }

    #[test]
    fn log_linear_uses_intended_form() {
        let s = NoiseSchedule::log_linear(1e-3);
        assert_eq!(s.sigma_bar(0.0).unwrap(), 0.0);
        assert!((s.sigma_bar(1.0).unwrap() - (1e3f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn schedules_strictly_increasing() {
        for sched in [NoiseSchedule::log_linear(1e-4), NoiseSchedule::geometric(1e-5, 20.0)] {
            let mut prev = sched.sigma_bar(1e-3).unwrap();
            for k in 1..=200 {
                let t = 1e-3 + k as f64 * (1.0 - 1e-3) / 200.0;
                let v = sched.sigma_bar(t.min(1.0)).unwrap();
                assert!(v > prev);
                assert!(sched.sigma(t.min(1.0)).unwrap() > 0.0);
                prev = v;
            }
        }
    }

    #[test]
    fn stationary_sums_to_one() {
        let pi = TransitionSpec::absorbing(7).stationary(DEFAULT_LEAKAGE).unwrap();
        assert!((pi.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((pi.prob(7) - (1.0 - DEFAULT_LEAKAGE)).abs() < 1e-15);
        assert!(TransitionSpec::absorbing(3).stationary(1.5).is_err());
    }
}
