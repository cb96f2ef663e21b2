//! Reverse-process simulation by τ-leaping.
//!
//! Every position is updated independently from a per-position categorical
//! distribution built from the model's scores. Prompted positions are
//! projected back to their given tokens after every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{Diffusion, TransitionSpec};
use crate::scores::{ScoreEval, ScoreModel};
use crate::{par_map, stream_rng};

/// Tolerance on `t − Δt ≥ t_min` for grids built in floating point.
const TIME_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMethod {
    Euler,
    Tweedie,
    /// Tweedie update that rejects inconsistent scores instead of clipping.
    ExactTweedie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeGrid {
    /// Equal steps in `t` from 1 down to `t_min`.
    Uniform,
    /// Equal ratios in `σ̄` from `σ̄(1)` down to `σ̄(t_min)`.
    GeometricSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub steps: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// Absorbing process only: fill positions still masked at `t_min` by
    /// sampling proportionally to their scores.
    pub final_denoise: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::Tweedie,
            steps: 128,
            grid: TimeGrid::Uniform,
            seed: 0,
            final_denoise: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(())
    }

    /// Decreasing times `1 = t_0 > … > t_steps = t_min`.
    pub fn time_grid(&self, diffusion: &Diffusion) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.steps;
        let t_min = diffusion.t_min;
        let mut grid: Vec<f64> = match self.grid {
            TimeGrid::Uniform => (0..=n)
                .map(|k| 1.0 - (1.0 - t_min) * k as f64 / n as f64)
                .collect(),
            TimeGrid::GeometricSigma => {
                let hi = diffusion.schedule.sigma_bar(1.0)?.ln();
                let lo = diffusion.schedule.sigma_bar(t_min)?.ln();
                (0..=n)
                    .map(|k| {
                        let sb = (hi + (lo - hi) * k as f64 / n as f64).exp();
                        diffusion.schedule.time_at(sb)
                    })
                    .collect::<Result<_>>()?
            }
        };
        grid[0] = 1.0;
        grid[n] = t_min;
        Ok(grid)
    }
}

/// Filled positions `Ω̄` and their tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pairs: Vec<(usize, usize)>,
}

impl PromptSpec {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates positions against `seq_len` and tokens against the
    /// ordinary vocabulary `0..num_tokens`.
    pub fn new(pairs: Vec<(usize, usize)>, seq_len: usize, num_tokens: usize) -> Result<Self> {
        let mut seen = vec![false; seq_len];
        for &(pos, tok) in &pairs {
            if pos >= seq_len {
                return Err(Error::arg(format!("prompt position {pos} outside length {seq_len}")));
            }
            if std::mem::replace(&mut seen[pos], true) {
                return Err(Error::arg(format!("prompt position {pos} given twice")));
            }
            if tok >= num_tokens {
                return Err(Error::arg(format!("prompt token {tok} is not an ordinary token")));
            }
        }
        Ok(Self { pairs })
    }

    /// Parses `"pos:token,pos:token"`.
    pub fn parse(text: &str, seq_len: usize, num_tokens: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (p, t) = item
                .split_once(':')
                .ok_or_else(|| Error::arg(format!("prompt entry {item:?} is not pos:token")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::arg(format!("prompt entry {item:?} is not pos:token")))
            };
            pairs.push((parse(p)?, parse(t)?));
        }
        Self::new(pairs, seq_len, num_tokens)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn project(&self, x: &mut [usize]) {
        for &(pos, tok) in &self.pairs {
            x[pos] = tok;
        }
    }
}

/// Per-position step distributions, row-major `d × num_states`, plus the
/// mass removed by clipping negative entries.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub num_states: usize,
    pub probs: Vec<f64>,
    pub clipped_mass: f64,
}

impl StepDistribution {
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.probs[pos * self.num_states..(pos + 1) * self.num_states]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.probs
            .chunks(self.num_states)
            .map(|row| draw(row, rng))
            .collect()
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Clips negatives to zero and normalizes; returns the clipped mass.
fn clip_normalize(row: &mut [f64], pos: usize, strict: bool) -> Result<f64> {
    let mut clipped = 0.0;
    let scale = row.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for v in row.iter_mut() {
        if *v < 0.0 {
            if strict && *v < -1e-10 * scale.max(1.0) {
                return Err(Error::arg(format!(
                    "scores at position {pos} are inconsistent: step probability {v:e}"
                )));
            }
            clipped -= *v;
            *v = 0.0;
        }
    }
    let total: f64 = row.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Sampler(format!(
            "no probability mass left at position {pos} (clipped {clipped:e})"
        )));
    }
    row.iter_mut().for_each(|v| *v /= total);
    Ok(clipped)
}

fn check_step(diffusion: &Diffusion, t: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0) || t > 1.0 || t - dt < diffusion.t_min - TIME_EPS {
        return Err(Error::arg(format!(
            "step from t = {t} by {dt} leaves [{}, 1]",
            diffusion.t_min
        )));
    }
    Ok(())
}

fn check_state<M: ScoreModel + ?Sized>(model: &M, spec: &TransitionSpec, x: &[usize]) -> Result<()> {
    if model.num_states() != spec.num_states() || x.len() != model.seq_len() {
        return Err(Error::arg("sequence, model and process disagree on shape"));
    }
    Ok(())
}

/// Euler τ-leaping distribution: off-token mass `Δt·σ(t)·Q(x_i, y)·s_{i,y}`,
/// the remainder on `x_i`.
pub fn euler_step_probs(
    ev: &ScoreEval,
    x_t: &[usize],
    t: f64,
    dt: f64,
    diffusion: &Diffusion,
) -> Result<StepDistribution> {
    check_step(diffusion, t, dt)?;
    let spec = &diffusion.process;
    let m = spec.num_states();
    let rate = dt * diffusion.schedule.sigma(t)?;
    let mut probs = vec![0.0; x_t.len() * m];
    let mut clipped_mass = 0.0;
    for (i, &x) in x_t.iter().enumerate() {
        let row = &mut probs[i * m..(i + 1) * m];
        let mut leave = 0.0;
        for y in 0..m {
            if y == x {
                continue;
            }
            let q = spec.rate_unchecked(x, y);
            if q == 0.0 {
                continue;
            }
            row[y] = rate * q * ev.ratio(i, y);
            leave += row[y];
        }
        row[x] = 1.0 - leave;
        clipped_mass += clip_normalize(row, i, false)?;
    }
    Ok(StepDistribution {
        num_states: m,
        probs,
        clipped_mass,
    })
}

/// Tweedie τ-leaping distribution: per position
/// `(exp(−σ̄_Δ Q)·s_i)_z · exp(σ̄_Δ Q)(x_i, z)` with `σ̄_Δ = σ̄(t) − σ̄(t − Δt)`.
pub fn tweedie_step_probs(
    ev: &ScoreEval,
    x_t: &[usize],
    t: f64,
    dt: f64,
    diffusion: &Diffusion,
    strict: bool,
) -> Result<StepDistribution> {
    check_step(diffusion, t, dt)?;
    let spec = &diffusion.process;
    let m = spec.num_states();
    let delta = diffusion.schedule.sigma_bar_unchecked(t)
        - diffusion.schedule.sigma_bar_unchecked((t - dt).max(diffusion.t_min));
    let mut probs = Vec::with_capacity(x_t.len() * m);
    let mut clipped_mass = 0.0;
    for (i, &x) in x_t.iter().enumerate() {
        let mut row = tweedie_row(spec, delta, x, &ev.ratio_row(i));
        clipped_mass += clip_normalize(&mut row, i, strict)?;
        probs.extend(row);
    }
    Ok(StepDistribution {
        num_states: m,
        probs,
        clipped_mass,
    })
}

fn tweedie_row(spec: &TransitionSpec, delta: f64, x: usize, ratios: &[f64]) -> Vec<f64> {
    let back = spec.apply_inverse_kernel(delta, ratios);
    back.iter()
        .enumerate()
        .map(|(z, &v)| {
            let k = spec.kernel_entry(delta, x, z);
            if k == 0.0 {
                0.0
            } else {
                v * k
            }
        })
        .collect()
}

/// Exact reverse transition `p(x_{t−ε} | x_t)` of a single categorical
/// variable from its full ratio vector `p_t(y)/p_t(x_t)`, where `σ̄` is the
/// noise accumulated between the two times.
pub fn exact_tweedie_denoise(ratios: &[f64], spec: &TransitionSpec, sigma_bar: f64, x_t: usize) -> Result<Vec<f64>> {
    crate::process::check_sigma_bar(sigma_bar)?;
    if ratios.len() != spec.num_states() || x_t >= ratios.len() {
        return Err(Error::arg("ratio vector does not match the process"));
    }
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) || (ratios[x_t] - 1.0).abs() > 1e-12 {
        return Err(Error::arg("ratios must be finite, nonnegative and 1 at x_t"));
    }
    let mut row = tweedie_row(spec, sigma_bar, x_t, ratios);
    clip_normalize(&mut row, 0, true)?;
    Ok(row)
}

/// One Euler τ-leaping step; returns the new sequence and the clipped mass.
pub fn euler_step<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x_t: &[usize],
    t: f64,
    dt: f64,
    diffusion: &Diffusion,
    rng: &mut R,
) -> Result<(Vec<usize>, f64)> {
    check_state(model, &diffusion.process, x_t)?;
    let ev = model.eval(x_t, diffusion.schedule.sigma_bar(t)?)?;
    let dist = euler_step_probs(&ev, x_t, t, dt, diffusion)?;
    Ok((dist.sample(rng), dist.clipped_mass))
}

/// One Tweedie τ-leaping step.
pub fn tweedie_step<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x_t: &[usize],
    t: f64,
    dt: f64,
    diffusion: &Diffusion,
    rng: &mut R,
) -> Result<(Vec<usize>, f64)> {
    check_state(model, &diffusion.process, x_t)?;
    let ev = model.eval(x_t, diffusion.schedule.sigma_bar(t)?)?;
    let dist = tweedie_step_probs(&ev, x_t, t, dt, diffusion, false)?;
    Ok((dist.sample(rng), dist.clipped_mass))
}

/// A generated sequence with its accumulated clipping diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub clipped_mass: f64,
}

/// Draws the prior: uniform tokens, or all MASK for the absorbing process.
fn draw_prior<R: Rng + ?Sized>(spec: &TransitionSpec, seq_len: usize, rng: &mut R) -> Vec<usize> {
    match spec.mask() {
        Some(mask) => vec![mask; seq_len],
        None => (0..seq_len).map(|_| rng.random_range(0..spec.n)).collect(),
    }
}

/// Unconditional generation; identical to [`infill`] with an empty prompt.
pub fn sample<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    diffusion: &Diffusion,
    config: &SamplerConfig,
    seq_len: usize,
    rng: &mut R,
) -> Result<Sample> {
    infill(model, diffusion, config, seq_len, &PromptSpec::empty(), rng)
}

/// Conditional generation: starts from the prior with the prompt written
/// in and re-projects the prompt after every reverse step.
pub fn infill<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    diffusion: &Diffusion,
    config: &SamplerConfig,
    seq_len: usize,
    prompt: &PromptSpec,
    rng: &mut R,
) -> Result<Sample> {
    config.validate()?;
    diffusion.validate()?;
    let spec = &diffusion.process;
    if model.seq_len() != seq_len || model.num_states() != spec.num_states() {
        return Err(Error::arg("model does not match the requested shape"));
    }
    let prompt = PromptSpec::new(prompt.pairs.clone(), seq_len, spec.n)?;
    let grid = config.time_grid(diffusion)?;
    let mut x = draw_prior(spec, seq_len, rng);
    prompt.project(&mut x);
    let mut clipped = 0.0;
    for w in grid.windows(2) {
        let (t, dt) = (w[0], w[0] - w[1]);
        let ev = model.eval(&x, diffusion.schedule.sigma_bar(t)?)?;
        let dist = match config.method {
            SamplerMethod::Euler => euler_step_probs(&ev, &x, t, dt, diffusion)?,
            SamplerMethod::Tweedie => tweedie_step_probs(&ev, &x, t, dt, diffusion, false)?,
            SamplerMethod::ExactTweedie => tweedie_step_probs(&ev, &x, t, dt, diffusion, true)?,
        };
        clipped += dist.clipped_mass;
        x = dist.sample(rng);
        prompt.project(&mut x);
    }
    if let (Some(mask), true) = (spec.mask(), config.final_denoise) {
        if x.contains(&mask) {
            let ev = model.eval(&x, diffusion.schedule.sigma_bar(diffusion.t_min)?)?;
            for i in 0..seq_len {
                if x[i] == mask {
                    let mut row = ev.ratio_row(i);
                    row[mask] = 0.0;
                    clip_normalize(&mut row, i, false)?;
                    x[i] = draw(&row, rng);
                }
            }
            prompt.project(&mut x);
        }
    }
    Ok(Sample {
        tokens: x,
        clipped_mass: clipped,
    })
}

/// `count` independent chains; chain `k` uses stream `k` of `config.seed`.
pub fn sample_many<M: ScoreModel + ?Sized>(
    model: &M,
    diffusion: &Diffusion,
    config: &SamplerConfig,
    seq_len: usize,
    prompt: &PromptSpec,
    count: usize,
) -> Result<Vec<Sample>> {
    par_map(count, |k| {
        let mut rng = stream_rng(config.seed, k as u64);
        infill(model, diffusion, config, seq_len, prompt, &mut rng)
    })
    .into_iter()
    .collect()
}

/// Histogram of sequences, indexed like [`crate::oracle::encode_sequence`].
pub fn empirical_distribution(samples: &[Sample], num_states: usize, seq_len: usize) -> Result<Vec<f64>> {
    let size = crate::oracle::space_size(num_states, seq_len)
        .filter(|&s| s <= crate::oracle::MAX_ENUMERATED)
        .ok_or(Error::Capacity {
            what: "sample histogram",
            size: crate::oracle::space_size(num_states, seq_len).unwrap_or(usize::MAX),
            limit: crate::oracle::MAX_ENUMERATED,
        })?;
    let mut h = vec![0.0; size];
    for s in samples {
        h[crate::oracle::encode_sequence(&s.tokens, num_states)] += 1.0;
    }
    let k = samples.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= k);
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{evolve, exact_concrete_score, exact_reverse_kernel, tv_distance, EnumeratedDist, ExactScoreModel};
    use crate::process::NoiseSchedule;
    use crate::scores::TabularScore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diffusion(spec: TransitionSpec) -> Diffusion {
        Diffusion::new(spec, NoiseSchedule::geometric(1e-3, 10.0))
    }

    #[test]
    fn zero_steps_is_config_error() {
        let diff = diffusion(TransitionSpec::uniform(3));
        let model = TabularScore::new(3, 1, false).unwrap();
        let cfg = SamplerConfig { steps: 0, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample(&model, &diff, &cfg, 1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn grids_are_decreasing_and_pinned() {
        let diff = diffusion(TransitionSpec::uniform(3));
        for grid in [TimeGrid::Uniform, TimeGrid::GeometricSigma] {
            let cfg = SamplerConfig { steps: 17, grid, ..SamplerConfig::default() };
            let g = cfg.time_grid(&diff).unwrap();
            assert_eq!(g.len(), 18);
            assert_eq!((g[0], g[17]), (1.0, diff.t_min));
            assert!(g.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn euler_with_unit_scores() {
        let spec = TransitionSpec::uniform(4);
        let diff = diffusion(spec);
        let model = TabularScore::new(4, 1, false).unwrap();
        let (t, dt) = (0.5, 0.01);
        let ev = model.eval(&[2], diff.schedule.sigma_bar(t).unwrap()).unwrap();
        let dist = euler_step_probs(&ev, &[2], t, dt, &diff).unwrap();
        let expect = dt * diff.schedule.sigma(t).unwrap() * spec.scale;
        for y in [0, 1, 3] {
            assert!((dist.row(0)[y] - expect).abs() < 1e-15);
        }
        let tiny = euler_step_probs(&ev, &[2], t, 1e-12, &diff).unwrap();
        assert!(tiny.row(0)[2] > 1.0 - 1e-10);
    }

    #[test]
    fn euler_clips_overshoot() {
        let spec = TransitionSpec::uniform(4);
        let diff = Diffusion::new(spec, NoiseSchedule::geometric(1e-3, 200.0));
        let model = TabularScore::new(4, 1, false).unwrap();
        let ev = model.eval(&[0], 1.0).unwrap();
        let dist = euler_step_probs(&ev, &[0], 1.0, 0.9, &diff).unwrap();
        assert!(dist.clipped_mass > 0.0);
        assert_eq!(dist.row(0)[0], 0.0);
        assert!((dist.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euler_local_error_is_second_order() {
        let spec = TransitionSpec::uniform(4);
        let diff = diffusion(spec);
        let p0 = EnumeratedDist::new(4, 1, vec![0.5, 0.25, 0.15, 0.1]).unwrap();
        let model = ExactScoreModel::new(&p0, spec).unwrap();
        let t = 0.6;
        let gap = |dt: f64| {
            let prev = evolve(&p0, &spec, diff.schedule.sigma_bar(t - dt).unwrap()).unwrap();
            let sb_delta = diff.schedule.sigma_bar_increment(t, dt).unwrap();
            let truth = exact_reverse_kernel(&prev, &spec, sb_delta, &[1]).unwrap();
            let ev = model.eval(&[1], diff.schedule.sigma_bar(t).unwrap()).unwrap();
            let dist = euler_step_probs(&ev, &[1], t, dt, &diff).unwrap();
            tv_distance(dist.row(0), &truth).unwrap()
        };
        for dt in [0.04, 0.02, 0.01] {
            assert!(gap(dt) / gap(dt / 2.0) >= 3.0, "dt={dt}");
        }
    }

    #[test]
    fn tweedie_identity_when_no_noise_elapses() {
        let spec = TransitionSpec::absorbing(3);
        let diff = diffusion(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = TabularScore::new(4, 2, true).unwrap();
        crate::scores::jitter_params(&mut model, 1.0, &mut rng);
        let ev = model.eval(&[3, 1], 1.0).unwrap();
        let dist = tweedie_step_probs(&ev, &[3, 1], 0.5, 1e-300, &diff, false).unwrap();
        assert_eq!(dist.row(0), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(dist.row(1), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn tweedie_single_step_is_exact_posterior_in_one_dimension() {
        let p0 = EnumeratedDist::new(4, 1, vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        for spec in [TransitionSpec::uniform(4), TransitionSpec::absorbing(4)] {
            let diff = diffusion(spec);
            let model = ExactScoreModel::new(&p0, spec).unwrap();
            let t = 0.7;
            let dt = t - diff.t_min;
            let prev = evolve(&p0.embed(spec.num_states()).unwrap(), &spec, diff.schedule.sigma_bar(diff.t_min).unwrap()).unwrap();
            let delta = diff.schedule.sigma_bar_increment(t, dt).unwrap();
            for x in 0..spec.num_states() {
                let ev = model.eval(&[x], diff.schedule.sigma_bar(t).unwrap()).unwrap();
                let dist = tweedie_step_probs(&ev, &[x], t, dt, &diff, true).unwrap();
                let truth = exact_reverse_kernel(&prev, &spec, delta, &[x]).unwrap();
                for (a, b) in dist.row(0).iter().zip(&truth) {
                    assert!((a - b).abs() < 1e-9, "{:?} x={x}", spec.kind);
                }
            }
        }
    }

    #[test]
    fn exact_denoise_recovers_previous_marginal() {
        let spec = TransitionSpec::uniform(2);
        let prev = EnumeratedDist::new(2, 1, vec![0.9, 0.1]).unwrap();
        let pt = evolve(&prev, &spec, 0.5).unwrap();
        let mut recovered = [0.0; 2];
        for x in 0..2 {
            let ratios = exact_concrete_score(&pt, &[x]).unwrap();
            let k = exact_tweedie_denoise(&ratios, &spec, 0.5, x).unwrap();
            for z in 0..2 {
                recovered[z] += pt.probs()[x] * k[z];
            }
        }
        assert!(tv_distance(&recovered, prev.probs()).unwrap() <= 1e-10);
    }

    #[test]
    fn exact_denoise_degenerate_cases() {
        let spec = TransitionSpec::uniform(5);
        let ratios = [0.3, 1.0, 2.0, 0.5, 0.1];
        assert_eq!(exact_tweedie_denoise(&ratios, &spec, 0.0, 1).unwrap(), vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        let ones = [1.0; 5];
        let k = exact_tweedie_denoise(&ones, &spec, 0.8, 3).unwrap();
        let col = spec.transition_column(0.8, 3).unwrap();
        for (a, b) in k.iter().zip(&col) {
            assert!((a - b).abs() < 1e-12);
        }
        // a wildly inconsistent ratio vector forces negative probabilities
        assert!(exact_tweedie_denoise(&[50.0, 1.0, 0.0, 0.0, 0.0], &spec, 2.0, 1).is_err());
    }

    #[test]
    fn prompt_validation_and_projection() {
        assert!(PromptSpec::new(vec![(0, 1), (0, 2)], 3, 4).is_err());
        assert!(PromptSpec::new(vec![(3, 1)], 3, 4).is_err());
        assert!(PromptSpec::new(vec![(0, 4)], 3, 4).is_err());
        let p = PromptSpec::parse("2:1, 0:3", 3, 4).unwrap();
        let mut x = vec![4, 4, 4];
        p.project(&mut x);
        let once = x.clone();
        p.project(&mut x);
        assert_eq!(x, once);
        assert_eq!(x, vec![3, 4, 1]);
        assert!(PromptSpec::parse("1-2", 3, 4).is_err());
    }

    #[test]
    fn full_prompt_is_returned() {
        let spec = TransitionSpec::uniform(4);
        let diff = diffusion(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = TabularScore::new(4, 3, false).unwrap();
        crate::scores::jitter_params(&mut model, 2.0, &mut rng);
        let prompt = PromptSpec::new(vec![(0, 2), (1, 0), (2, 3)], 3, 4).unwrap();
        let cfg = SamplerConfig { steps: 1, ..SamplerConfig::default() };
        assert_eq!(infill(&model, &diff, &cfg, 3, &prompt, &mut rng).unwrap().tokens, vec![2, 0, 3]);
    }

    #[test]
    fn empty_prompt_matches_sample() {
        let spec = TransitionSpec::absorbing(3);
        let diff = diffusion(spec);
        let p = EnumeratedDist::uniform(3, 2).unwrap();
        let model = ExactScoreModel::new(&p, spec).unwrap();
        let cfg = SamplerConfig { steps: 20, ..SamplerConfig::default() };
        for seed in 0..20 {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let s = sample(&model, &diff, &cfg, 2, &mut a).unwrap();
            let t = infill(&model, &diff, &cfg, 2, &PromptSpec::empty(), &mut b).unwrap();
            assert_eq!(s, t);
        }
    }

    #[test]
    fn one_step_absorbing_sample_uses_final_rule() {
        let spec = TransitionSpec::absorbing(4);
        let diff = diffusion(spec);
        let p0 = EnumeratedDist::new(4, 1, vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        let model = ExactScoreModel::new(&p0, spec).unwrap();
        let cfg = SamplerConfig { steps: 1, seed: 5, ..SamplerConfig::default() };
        let samples = sample_many(&model, &diff, &cfg, 1, &PromptSpec::empty(), 20_000).unwrap();
        assert!(samples.iter().all(|s| s.tokens[0] < 4));
        let emp = empirical_distribution(&samples, 4, 1).unwrap();
        assert!(tv_distance(&emp, p0.probs()).unwrap() < 0.02);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let spec = TransitionSpec::uniform(3);
        let diff = diffusion(spec);
        let p = EnumeratedDist::uniform(3, 2).unwrap();
        let model = ExactScoreModel::new(&p, spec).unwrap();
        for method in [SamplerMethod::Euler, SamplerMethod::Tweedie, SamplerMethod::ExactTweedie] {
            let cfg = SamplerConfig { method, steps: 10, seed: 9, ..SamplerConfig::default() };
            let a = sample_many(&model, &diff, &cfg, 2, &PromptSpec::empty(), 50).unwrap();
            let b = sample_many(&model, &diff, &cfg, 2, &PromptSpec::empty(), 50).unwrap();
            assert_eq!(a, b);
        }
    }
}
