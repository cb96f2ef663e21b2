//! Acceptance checks: every fast path measured against its oracle.
//!
//! Each check reports one or more [`Measure`]s (a value and the largest
//! value that still passes) and its wall time against a budget.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{gen_iid, gen_markov, Corpus};
use crate::error::{Error, Result};
use crate::likelihood::{corpus_eval, nll_bound};
use crate::losses::{
    dwdse_with_grad, denoising_score_entropy, denoising_score_entropy_with_grad, implicit_score_entropy,
    implicit_score_entropy_with_grad, prior_kl, score_entropy, score_entropy_with_grad, se_term_grad, DseMode,
    RateWeights, UniformTime,
};
use crate::oracle::{
    dense_expm, evolve, exact_concrete_score, exact_dwdse, exact_reverse_kernel, exact_reverse_solve,
    kl_divergence, finite_difference_grad, tv_distance, DenseMatrix, EnumeratedDist, ExactMeanModel,
    ExactScoreModel, ReverseSolveOptions,
};
use crate::process::{Diffusion, NoiseSchedule, TransitionSpec};
use crate::samplers::{
    empirical_distribution, euler_step_probs, exact_tweedie_denoise, sample_many, tweedie_step_probs,
    PromptSpec, SamplerConfig, SamplerMethod,
};
use crate::scores::{
    jitter_params, score_from_mean, MeanMlpScore, MlpConfig, MlpScore, ScoreModel, TabularScore,
    TrainableScore,
};
use crate::stream_rng;
use crate::training::{train, Checkpoint, LossKind, LrSchedule, StepMetrics, TrainConfig, TrainData};

/// Default seed of the suite.
pub const VERIFY_SEED: u64 = 20231016;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    pub what: String,
    pub value: f64,
    pub limit: f64,
}

impl Measure {
    pub fn ok(&self) -> bool {
        self.value <= self.limit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub measures: Vec<Measure>,
    pub seconds: f64,
    pub budget_seconds: f64,
    pub error: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && !self.measures.is_empty()
            && self.measures.iter().all(Measure::ok)
            && self.seconds <= self.budget_seconds
    }

    /// One line: status, name, each measure, time.
    pub fn summary(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let mut line = format!("[{status}] {:>2} {}:", self.criterion, self.name);
        for m in &self.measures {
            let flag = if m.ok() { "" } else { " (!)" };
            line.push_str(&format!(" {} = {:.3e} <= {:.1e}{flag};", m.what, m.value, m.limit));
        }
        if let Some(e) = &self.error {
            line.push_str(&format!(" error: {e};"));
        }
        line.push_str(&format!(" {:.2} s of {:.0} s", self.seconds, self.budget_seconds));
        line
    }
}

/// Which checks [`run_suite`] executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Checks that need no training.
    Oracle,
    Full,
}

type CheckFn = fn(u64) -> Check;

/// Every check in criterion order, with whether it trains a model.
pub fn catalog() -> Vec<(CheckFn, bool)> {
    vec![
        (kernel_correctness as CheckFn, false),
        (consistency, true),
        (loss_equivalences, false),
        (gradient_identities, false),
        (tweedie_exactness, false),
        (factorized_optimality, false),
        (elbo_exact_scores, false),
        (elbo_trained, true),
        (end_to_end_sampling, true),
        (infilling, false),
        (mean_bridge, false),
        (mean_ablation, true),
        (reproducibility, false),
    ]
}

pub fn run_suite(scope: Scope, seed: u64, on_check: &mut dyn FnMut(&Check)) -> Vec<Check> {
    catalog()
        .into_iter()
        .filter(|(_, trains)| scope == Scope::Full || !trains)
        .map(|(f, _)| {
            let c = f(seed);
            on_check(&c);
            c
        })
        .collect()
}

fn run(criterion: u8, name: &str, budget: f64, body: impl FnOnce(&mut Vec<Measure>) -> Result<()>) -> Check {
    let start = Instant::now();
    let mut measures = Vec::new();
    let error = body(&mut measures).err().map(|e| e.to_string());
    Check {
        criterion,
        name: name.to_string(),
        measures,
        seconds: start.elapsed().as_secs_f64(),
        budget_seconds: budget,
        error,
    }
}

fn measure(out: &mut Vec<Measure>, what: &str, value: f64, limit: f64) {
    out.push(Measure {
        what: what.to_string(),
        value,
        limit,
    });
}

/// Max that propagates NaN.
fn worst(acc: f64, v: f64) -> f64 {
    if v.is_nan() || acc.is_nan() {
        f64::NAN
    } else {
        acc.max(v)
    }
}

fn random_dist(rng: &mut ChaCha8Rng, m: usize, d: usize, floor: f64) -> Result<EnumeratedDist> {
    let w = (0..m.pow(d as u32)).map(|_| rng.random::<f64>() + floor).collect();
    EnumeratedDist::from_weights(m, d, w)
}

fn both_kinds(n: usize) -> [TransitionSpec; 2] {
    [TransitionSpec::uniform(n), TransitionSpec::absorbing(n)]
}

fn diffusion_for(spec: TransitionSpec) -> Diffusion {
    let schedule = if spec.is_absorbing() {
        NoiseSchedule::log_linear(1e-3)
    } else {
        NoiseSchedule::default()
    };
    Diffusion::new(spec, schedule)
}

fn all_sequences(m: usize, d: usize) -> Vec<Vec<usize>> {
    (0..m.pow(d as u32)).map(|i| crate::oracle::decode_sequence(i, m, d)).collect()
}

/// Closed-form kernels against a dense matrix exponential.
pub fn kernel_correctness(_seed: u64) -> Check {
    run(1, "kernel correctness", 5.0, |out| {
        let mut err: f64 = 0.0;
        for n in [2, 5, 30] {
            for spec in both_kinds(n) {
                let m = spec.num_states();
                let q = DenseMatrix::from_fn(m, |d, s| spec.rate_unchecked(d, s));
                for k in 0..20 {
                    let sb = 1e-3 * (2e4f64).powf(k as f64 / 19.0);
                    let e = dense_expm(&q, sb)?;
                    for src in 0..m {
                        for dest in 0..m {
                            let v = spec.transition_prob(sb, dest, src)?;
                            err = worst(err, (v - e.get(dest, src)).abs());
                        }
                    }
                }
            }
        }
        measure(out, "max abs error", err, 1e-8);
        Ok(())
    })
}

fn max_score_rel_error<M: ScoreModel>(model: &M, pt: &EnumeratedDist, sb: f64) -> Result<f64> {
    let mut err: f64 = 0.0;
    for x in all_sequences(pt.num_states(), pt.seq_len()) {
        if pt.prob(&x) <= 0.0 {
            continue;
        }
        let ev = model.eval(&x, sb)?;
        let exact = exact_concrete_score(pt, &x)?;
        let m = pt.num_states();
        for i in 0..x.len() {
            for y in 0..m {
                if y == x[i] || ev.is_excluded(i, y) || exact[i * m + y] == 0.0 {
                    continue;
                }
                let e = exact[i * m + y];
                err = worst(err, (ev.ratio(i, y) - e).abs() / e);
            }
        }
    }
    Ok(err)
}

/// Exact full-batch training of a tabular model recovers the true ratios.
pub fn consistency(seed: u64) -> Check {
    run(2, "consistency", 60.0, |out| {
        let mut rng = stream_rng(seed, 2);
        let sb = 1.0;
        let (mut rel, mut gap): (f64, f64) = (0.0, 0.0);
        for spec in both_kinds(8) {
            let p = random_dist(&mut rng, 8, 1, 0.1)?;
            let m = spec.num_states();
            let diffusion = diffusion_for(spec);
            let config = TrainConfig {
                steps: 5000,
                batch_size: 1,
                lr: 0.05,
                warmup_steps: 0,
                lr_schedule: LrSchedule::LinearDecay,
                grad_clip: 1e3,
                ema_decay: 0.0,
                seed,
                loss: LossKind::DseFixed { sigma_bar: sb },
                eval_every: 0,
                eval_mc_samples: 1,
            };
            let model = TabularScore::new(m, 1, spec.is_absorbing())?;
            let trained = train(model, &diffusion, &config, TrainData::Exact(&p), &mut |_| {})?.model;
            let pt = evolve(&p.embed(m)?, &spec, sb)?;
            rel = worst(rel, max_score_rel_error(&trained, &pt, sb)?);
            let w = RateWeights(spec);
            let floor = score_entropy(&ExactScoreModel::new(&p, spec)?, &pt, &w, sb)?;
            gap = worst(gap, score_entropy(&trained, &pt, &w, sb)? - floor);
        }
        measure(out, "max relative score error", rel, 1e-3);
        measure(out, "score entropy above floor", gap, 1e-6);
        Ok(())
    })
}

fn random_table(rng: &mut ChaCha8Rng, m: usize, d: usize, absorbing: bool) -> Result<TabularScore> {
    let mut t = TabularScore::new(m, d, absorbing)?;
    jitter_params(&mut t, 1.0, rng);
    Ok(t)
}

/// Implicit and denoising score entropy differ from score entropy by a
/// model-independent constant.
pub fn loss_equivalences(seed: u64) -> Check {
    run(3, "loss equivalences", 10.0, |out| {
        let mut rng = stream_rng(seed, 3);
        let (mut ise, mut dse): (f64, f64) = (0.0, 0.0);
        for spec in both_kinds(3) {
            let m = spec.num_states();
            let w = RateWeights(spec);
            for _ in 0..5 {
                let p0 = random_dist(&mut rng, 3, 2, 0.05)?;
                let sb = 0.2 + 2.0 * rng.random::<f64>();
                let pt = evolve(&p0.embed(m)?, &spec, sb)?;
                let a = random_table(&mut rng, m, 2, spec.is_absorbing())?;
                let b = random_table(&mut rng, m, 2, spec.is_absorbing())?;
                let d_se = score_entropy(&a, &pt, &w, sb)? - score_entropy(&b, &pt, &w, sb)?;
                let d_ise = implicit_score_entropy(&a, &pt, &w, sb)? - implicit_score_entropy(&b, &pt, &w, sb)?;
                let dse_of = |t: &TabularScore| denoising_score_entropy(t, &p0, &spec, sb, &w, DseMode::Exact);
                let d_dse = dse_of(&a)?.mean - dse_of(&b)?.mean;
                ise = worst(ise, (d_ise - d_se).abs());
                dse = worst(dse, (d_dse - d_se).abs());
            }
        }
        measure(out, "|dISE - dSE|", ise, 1e-10);
        measure(out, "|dDSE - dSE|", dse, 1e-10);
        Ok(())
    })
}

fn fd_rel_error<M, F>(model: &M, loss: F) -> Result<f64>
where
    M: TrainableScore + Clone,
    F: Fn(&M) -> Result<(f64, Vec<f64>)>,
{
    let (_, grad) = loss(model)?;
    let fd = finite_difference_grad(
        |theta| {
            let mut probe = model.clone();
            probe.params_mut().copy_from_slice(theta);
            loss(&probe).map(|(v, _)| v).unwrap_or(f64::NAN)
        },
        model.params(),
        1e-5,
    );
    let scale = fd.iter().fold(1e-6, |a: f64, v| a.max(v.abs()));
    Ok(grad.iter().zip(&fd).fold(0.0, |a: f64, (g, f)| worst(a, (g - f).abs() / scale)))
}

fn fd_all_losses<M: TrainableScore + Clone>(
    model: &M,
    spec: TransitionSpec,
    p0: &EnumeratedDist,
    seed: u64,
) -> Result<f64> {
    let m = spec.num_states();
    let sb = 0.7;
    let pt = evolve(&p0.embed(m)?, &spec, sb)?;
    let w = RateWeights(spec);
    let diffusion = diffusion_for(spec);
    let sampler = UniformTime::new(diffusion.t_min)?;
    let x0: Vec<usize> = p0.sequence(1);
    let mut err: f64 = 0.0;
    err = worst(err, fd_rel_error(model, |t| score_entropy_with_grad(t, &pt, &w, sb))?);
    err = worst(err, fd_rel_error(model, |t| implicit_score_entropy_with_grad(t, &pt, &w, sb))?);
    err = worst(err, fd_rel_error(model, |t| denoising_score_entropy_with_grad(t, p0, &spec, sb, &w))?);
    err = worst(
        err,
        fd_rel_error(model, |t| {
            let mut total = 0.0;
            let mut grad = vec![0.0; t.params().len()];
            for k in 0..4 {
                let mut rng = stream_rng(seed, 400 + k);
                let (v, g) = dwdse_with_grad(t, &x0, &spec, &diffusion.schedule, &sampler, &mut rng)?;
                total += v;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Ok((total, grad))
        })?,
    );
    Ok(err)
}

/// The score-entropy gradient identity and finite-difference checks of
/// every loss gradient for every backend.
pub fn gradient_identities(seed: u64) -> Check {
    run(4, "gradient identities", 60.0, |out| {
        let mut ident: f64 = 0.0;
        for i in 0..40 {
            let s = 10f64.powf(-3.0 + 6.0 * i as f64 / 39.0);
            for j in 0..25 {
                let a = 5.0 * j as f64 / 24.0;
                let lhs = 1.0 - a / s;
                let rhs = (s - a) / s;
                let g = se_term_grad(s, a, 1.0)?;
                let tol = lhs.abs().max(1.0);
                ident = worst(ident, (lhs - rhs).abs() / tol);
                ident = worst(ident, (g - rhs).abs() / tol);
            }
        }
        measure(out, "identity residual", ident, 1e-12);

        let mut rng = stream_rng(seed, 4);
        let mut fd: f64 = 0.0;
        for spec in both_kinds(3) {
            let m = spec.num_states();
            let absorbing = spec.is_absorbing();
            let p0 = random_dist(&mut rng, 3, 2, 0.05)?;
            let table = random_table(&mut rng, m, 2, absorbing)?;
            fd = worst(fd, fd_all_losses(&table, spec, &p0, seed)?);
            let config = MlpConfig {
                seq_len: 2,
                num_states: m,
                embed_dim: 3,
                hidden: 6,
                noise_features: 4,
                absorbing,
            };
            let mut mlp = MlpScore::new(config, seed)?;
            jitter_params(&mut mlp, 0.3, &mut rng);
            fd = worst(fd, fd_all_losses(&mlp, spec, &p0, seed)?);
            let mut mean = MeanMlpScore::new(config, spec, seed)?;
            jitter_params(&mut mean, 0.3, &mut rng);
            fd = worst(fd, fd_all_losses(&mean, spec, &p0, seed)?);
        }
        measure(out, "max finite-difference relative error", fd, 1e-4);
        Ok(())
    })
}

/// Noising a distribution and denoising it with exact ratios gives it back.
pub fn tweedie_exactness(seed: u64) -> Check {
    run(5, "tweedie exactness", 5.0, |out| {
        let mut rng = stream_rng(seed, 5);
        let mut tv: f64 = 0.0;
        for n in [2, 5, 20] {
            for spec in both_kinds(n) {
                let m = spec.num_states();
                for _ in 0..10 {
                    let prev = random_dist(&mut rng, m, 1, 0.02)?;
                    for sb in [0.1, 1.0, 5.0] {
                        let pt = evolve(&prev, &spec, sb)?;
                        let mut back = vec![0.0; m];
                        for x in 0..m {
                            let px = pt.probs()[x];
                            if px <= 0.0 {
                                continue;
                            }
                            let ratios: Vec<f64> = pt.probs().iter().map(|v| v / px).collect();
                            let row = exact_tweedie_denoise(&ratios, &spec, sb, x)?;
                            back.iter_mut().zip(row).for_each(|(b, r)| *b += px * r);
                        }
                        tv = worst(tv, tv_distance(&back, prev.probs())?);
                    }
                }
            }
        }
        measure(out, "max TV to the earlier marginal", tv, 1e-10);
        Ok(())
    })
}

fn factorized_kl(truth: &[f64], rows: &[Vec<f64>], m: usize, d: usize) -> Result<f64> {
    let q: Vec<f64> = all_sequences(m, d)
        .iter()
        .map(|y| y.iter().enumerate().map(|(i, &t)| rows[i][t]).product())
        .collect();
    kl_divergence(truth, &q)
}

/// Tweedie steps reproduce the true reverse marginals and beat Euler steps
/// in factorized KL.
pub fn factorized_optimality(seed: u64) -> Check {
    run(6, "factorized optimality", 30.0, |out| {
        let mut rng = stream_rng(seed, 6);
        let (mut m_err, mut kl_excess): (f64, f64) = (0.0, f64::NEG_INFINITY);
        let d = 2;
        for spec in both_kinds(4) {
            let m = spec.num_states();
            let p = random_dist(&mut rng, 4, d, 0.05)?;
            let model = ExactScoreModel::new(&p, spec)?;
            let diffusion = diffusion_for(spec);
            let sched = diffusion.schedule;
            for t in [0.2, 0.4, 0.6, 0.8, 1.0] {
                for dt in [0.1, 0.05, 0.01] {
                    let sb_t = sched.sigma_bar(t)?;
                    let sb_s = sched.sigma_bar(t - dt)?;
                    let ps = evolve(model.data(), &spec, sb_s)?;
                    let pt = model.marginal_at(sb_t)?;
                    for x in all_sequences(m, d) {
                        if pt.prob(&x) <= 0.0 {
                            continue;
                        }
                        let truth = exact_reverse_kernel(&ps, &spec, sb_t - sb_s, &x)?;
                        let ev = model.eval(&x, sb_t)?;
                        let tw = tweedie_step_probs(&ev, &x, t, dt, &diffusion, false)?;
                        let eu = euler_step_probs(&ev, &x, t, dt, &diffusion)?;
                        let mut marg = vec![vec![0.0; m]; d];
                        for (idx, y) in all_sequences(m, d).iter().enumerate() {
                            for i in 0..d {
                                marg[i][y[i]] += truth[idx];
                            }
                        }
                        for (i, row) in marg.iter().enumerate() {
                            for (a, b) in row.iter().zip(tw.row(i)) {
                                m_err = worst(m_err, (a - b).abs());
                            }
                        }
                        let rows = |s: &crate::samplers::StepDistribution| (0..d).map(|i| s.row(i).to_vec()).collect::<Vec<_>>();
                        let kl_tw = factorized_kl(&truth, &rows(&tw), m, d)?;
                        let kl_eu = factorized_kl(&truth, &rows(&eu), m, d)?;
                        let excess = if kl_eu.is_infinite() { f64::NEG_INFINITY } else { kl_tw - kl_eu };
                        kl_excess = if kl_tw.is_finite() { kl_excess.max(excess) } else { f64::INFINITY };
                    }
                }
            }
        }
        measure(out, "max marginal error", m_err, 1e-9);
        measure(out, "max KL(tweedie) - KL(euler)", kl_excess, 1e-12);
        Ok(())
    })
}

fn elbo_measures<M: ScoreModel>(
    model: &M,
    diffusion: &Diffusion,
    x0s: &[Vec<usize>],
    solve_steps: usize,
    seed: u64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut opts = ReverseSolveOptions::new(solve_steps, diffusion.t_min);
    opts.leakage = diffusion.leakage;
    let sol = exact_reverse_solve(model, &diffusion.process, &diffusion.schedule, model.seq_len(), opts)?;
    let mut violation = f64::NEG_INFINITY;
    let mut pairs = Vec::new();
    for (j, x0) in x0s.iter().enumerate() {
        let exact = -sol.dist.prob(x0).ln();
        let bound = nll_bound(model, x0, diffusion, 2000, crate::likelihood::derive_seed(seed, j as u64))?;
        violation = violation.max(exact - bound.mean - 3.0 * bound.stderr);
        pairs.push((exact, bound.mean));
    }
    Ok((violation, pairs))
}

/// Exact scores: the bound holds and, computed by quadrature, is tight.
pub fn elbo_exact_scores(seed: u64) -> Check {
    run(7, "elbo validity, exact scores", 60.0, |out| {
        let mut rng = stream_rng(seed, 7);
        let (mut violation, mut gap): (f64, f64) = (f64::NEG_INFINITY, 0.0);
        for spec in both_kinds(4) {
            let p = random_dist(&mut rng, 4, 3, 0.05)?;
            let model = ExactScoreModel::new(&p, spec)?;
            let diffusion = diffusion_for(spec);
            let x0s: Vec<Vec<usize>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(0..4)).collect()).collect();
            let (v, pairs) = elbo_measures(&model, &diffusion, &x0s, 400, seed)?;
            violation = violation.max(v);
            for (x0, (exact, _)) in x0s.iter().zip(pairs) {
                let bound = exact_dwdse(&model, x0, &spec, &diffusion.schedule, diffusion.t_min, 64)?
                    + prior_kl(x0, &spec, &diffusion.schedule, diffusion.leakage)?;
                gap = worst(gap, (bound - exact).abs());
            }
        }
        measure(out, "exact - (bound + 3 stderr)", violation, 0.0);
        measure(out, "|quadrature bound - exact|", gap, 0.05);
        Ok(())
    })
}

/// Trained models: the exact likelihood of the learned reverse process
/// never beats its bound.
pub fn elbo_trained(seed: u64) -> Check {
    run(7, "elbo validity, trained model", 60.0, |out| {
        let mut rng = stream_rng(seed, 70);
        let mut violation = f64::NEG_INFINITY;
        for spec in both_kinds(4) {
            let p = random_dist(&mut rng, 4, 3, 0.05)?;
            let probs_seed = rng.random::<u64>() >> 1;
            let corpus = sample_corpus(&p, 2000, probs_seed)?;
            let diffusion = diffusion_for(spec);
            let config = TrainConfig {
                steps: 300,
                batch_size: 32,
                lr: 0.03,
                warmup_steps: 20,
                ema_decay: 0.0,
                seed,
                ..TrainConfig::default()
            };
            let model = TabularScore::new(spec.num_states(), 3, spec.is_absorbing())?;
            let trained = train(model, &diffusion, &config, TrainData::Corpus { train: &corpus, valid: None }, &mut |_| {})?.model;
            let x0s: Vec<Vec<usize>> = corpus.sequences()[..8].to_vec();
            let (v, _) = elbo_measures(&trained, &diffusion, &x0s, 2000, seed)?;
            violation = violation.max(v);
        }
        measure(out, "exact - (bound + 3 stderr)", violation, 0.0);
        Ok(())
    })
}

/// Draws `count` sequences from an enumerated distribution.
fn sample_corpus(p: &EnumeratedDist, count: usize, seed: u64) -> Result<Corpus> {
    use rand::distr::weighted::WeightedIndex;
    use rand::distr::Distribution;
    let index = WeightedIndex::new(p.probs()).map_err(|e| Error::arg(e.to_string()))?;
    let mut rng = stream_rng(seed, 0);
    let seqs = (0..count).map(|_| p.sequence(index.sample(&mut rng))).collect();
    Corpus::new(p.num_states(), p.seq_len(), seqs)
}

fn small_mlp(spec: &TransitionSpec, seq_len: usize) -> MlpConfig {
    MlpConfig {
        seq_len,
        num_states: spec.num_states(),
        embed_dim: 16,
        hidden: 64,
        noise_features: 8,
        absorbing: spec.is_absorbing(),
    }
}

/// Train, then sample with Tweedie steps and compare to the data.
pub fn end_to_end_sampling(seed: u64) -> Check {
    run(8, "end-to-end sampling", 120.0, |out| {
        let probs = [0.05, 0.2, 0.1, 0.15, 0.03, 0.12, 0.25, 0.1];
        let mut tv: f64 = 0.0;
        for spec in both_kinds(8) {
            let diffusion = diffusion_for(spec);
            let corpus = gen_iid(8, 1, &probs, 20_000, seed)?;
            let config = TrainConfig {
                steps: 3000,
                batch_size: 64,
                lr: 3e-3,
                warmup_steps: 100,
                lr_schedule: LrSchedule::LinearDecay,
                ema_decay: 0.99,
                seed,
                ..TrainConfig::default()
            };
            let model = MlpScore::new(small_mlp(&spec, 1), seed)?;
            let outcome = train(model, &diffusion, &config, TrainData::Corpus { train: &corpus, valid: None }, &mut |_| {})?;
            let model = outcome.ema_model();
            let sampler = SamplerConfig {
                method: SamplerMethod::Tweedie,
                steps: 256,
                seed,
                ..SamplerConfig::default()
            };
            let samples = sample_many(&model, &diffusion, &sampler, 1, &PromptSpec::empty(), 4096)?;
            let emp = empirical_distribution(&samples, 8, 1)?;
            tv = worst(tv, tv_distance(&emp, &probs)?);
        }
        measure(out, "max TV(samples, data)", tv, 0.05);
        Ok(())
    })
}

/// Prompted generation with exact scores against the Bayes posterior.
pub fn infilling(seed: u64) -> Check {
    run(9, "infilling", 120.0, |out| {
        let mut rng = stream_rng(seed, 9);
        let spec = TransitionSpec::absorbing(4);
        let p = random_dist(&mut rng, 4, 3, 0.1)?;
        let model = ExactScoreModel::new(&p, spec)?;
        let diffusion = diffusion_for(spec);
        let patterns: [(&str, Vec<(usize, usize)>); 3] = [
            ("prefix", vec![(0, 1), (1, 3)]),
            ("suffix", vec![(1, 0), (2, 2)]),
            ("middle", vec![(0, 2), (2, 1)]),
        ];
        for (k, (name, pairs)) in patterns.into_iter().enumerate() {
            let prompt = PromptSpec::new(pairs.clone(), 3, 4)?;
            let sampler = SamplerConfig {
                seed: seed.wrapping_add(k as u64),
                ..SamplerConfig::default()
            };
            let samples = sample_many(&model, &diffusion, &sampler, 3, &prompt, 4096)?;
            let emp = empirical_distribution(&samples, 4, 3)?;
            let posterior = p.condition(&pairs)?;
            measure(out, &format!("TV {name}"), tv_distance(&emp, posterior.probs())?, 0.05);
        }
        Ok(())
    })
}

/// Scores implied by the exact posterior equal the exact scores.
pub fn mean_bridge(seed: u64) -> Check {
    run(10, "mean parameterization bridge", 10.0, |out| {
        let mut rng = stream_rng(seed, 10);
        let mut err: f64 = 0.0;
        for n in [3, 6] {
            for spec in both_kinds(n) {
                let m = spec.num_states();
                let p = random_dist(&mut rng, n, 1, 0.05)?;
                let mean = ExactMeanModel::new(&p, spec)?;
                for sb in [0.05, 0.5, 3.0] {
                    let pt = evolve(&p.embed(m)?, &spec, sb)?;
                    for x in 0..m {
                        let ev = score_from_mean(&mean, &spec, sb, &[x])?;
                        let exact = exact_concrete_score(&pt, &[x])?;
                        for y in 0..m {
                            if y != x && !ev.is_excluded(0, y) {
                                err = worst(err, (ev.ratio(0, y) - exact[y]).abs() / exact[y].max(1.0));
                            }
                        }
                    }
                }
            }
        }
        measure(out, "max score error", err, 1e-9);
        Ok(())
    })
}

fn ablation_corpus(seed: u64) -> Result<(Corpus, Corpus)> {
    let initial = [0.4, 0.3, 0.2, 0.1];
    let transition = vec![
        vec![0.1, 0.6, 0.2, 0.1],
        vec![0.2, 0.1, 0.6, 0.1],
        vec![0.1, 0.2, 0.1, 0.6],
        vec![0.6, 0.1, 0.2, 0.1],
    ];
    let corpus = gen_markov(4, 6, &initial, &transition, 5000, seed)?;
    corpus.split(0.1)
}

/// Score-parameterized training reaches a lower held-out bound than the
/// mean-parameterized model under the same budget.
pub fn mean_ablation(seed: u64) -> Check {
    run(10, "mean parameterization ablation", 180.0, |out| {
        let spec = TransitionSpec::absorbing(4);
        let diffusion = diffusion_for(spec);
        let (train_set, valid) = ablation_corpus(seed)?;
        let config = TrainConfig {
            steps: 1500,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 100,
            ema_decay: 0.99,
            seed,
            ..TrainConfig::default()
        };
        let data = TrainData::Corpus { train: &train_set, valid: None };
        let cfg = small_mlp(&spec, 6);
        let score = train(MlpScore::new(cfg, seed)?, &diffusion, &config, data, &mut |_| {})?;
        let mean = train(MeanMlpScore::new(cfg, spec, seed)?, &diffusion, &config, data, &mut |_| {})?;
        let eval_seed = seed.wrapping_add(1);
        let s = corpus_eval(&score.ema_model(), &valid, &diffusion, 32, eval_seed)?;
        let m = corpus_eval(&mean.ema_model(), &valid, &diffusion, 32, eval_seed)?;
        measure(out, "score bound - mean bound (nats)", s.nll_bound - m.nll_bound, 0.0);
        Ok(())
    })
}

fn mismatch(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return a.len().max(b.len()) as f64;
    }
    a.iter().zip(b).filter(|(x, y)| x.to_bits() != y.to_bits()).count() as f64
}

/// Same seed, same outputs, bit for bit; checkpoints round-trip exactly.
pub fn reproducibility(seed: u64) -> Check {
    run(11, "reproducibility", 60.0, |out| {
        let spec = TransitionSpec::absorbing(5);
        let diffusion = diffusion_for(spec);
        let gen = || gen_markov(5, 4, &[0.2; 5], &vec![vec![0.2; 5]; 5], 400, seed);
        let (c1, c2) = (gen()?, gen()?);
        measure(out, "corpus mismatches", (c1 != c2) as u8 as f64, 0.0);

        let config = TrainConfig {
            steps: 40,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 5,
            seed,
            eval_every: 20,
            eval_mc_samples: 4,
            ..TrainConfig::default()
        };
        let (tr, va) = c1.split(0.1)?;
        let run_once = || -> Result<(Vec<StepMetrics>, _)> {
            let mut log = Vec::new();
            let o = train(
                MlpScore::new(small_mlp(&spec, 4), seed)?,
                &diffusion,
                &config,
                TrainData::Corpus { train: &tr, valid: Some(&va) },
                &mut |m| log.push(StepMetrics { wall_time: 0.0, ..*m }),
            )?;
            Ok((log, o))
        };
        let (log1, o1) = run_once()?;
        let (log2, o2) = run_once()?;
        let mut bad = mismatch(o1.model.params(), o2.model.params()) + mismatch(&o1.ema, &o2.ema);
        bad += (log1 != log2 || o1.validation != o2.validation || o1.rng != o2.rng) as u8 as f64;
        measure(out, "training mismatches", bad, 0.0);

        let ck = Checkpoint::from_outcome(&o1, &diffusion, &config);
        let bytes = ck.to_bytes()?;
        let back = Checkpoint::from_bytes(&bytes)?;
        let mut ck_bad = (back != ck) as u8 as f64;
        ck_bad += (back.to_bytes()? != bytes) as u8 as f64;
        let reloaded = back.raw_model()?;
        let expect: Vec<f64> = o1.model.params().iter().map(|&v| v as f32 as f64).collect();
        ck_bad += mismatch(reloaded.params(), &expect);
        measure(out, "checkpoint round-trip mismatches", ck_bad, 0.0);

        let sampler = SamplerConfig {
            steps: 32,
            seed,
            ..SamplerConfig::default()
        };
        let s1 = sample_many(&o1.model, &diffusion, &sampler, 4, &PromptSpec::empty(), 64)?;
        let s2 = sample_many(&o1.model, &diffusion, &sampler, 4, &PromptSpec::empty(), 64)?;
        let e1 = corpus_eval(&o1.model, &va, &diffusion, 8, seed)?;
        let e2 = corpus_eval(&o1.model, &va, &diffusion, 8, seed)?;
        let mut other = (s1 != s2) as u8 as f64;
        other += mismatch(&e1.per_sequence, &e2.per_sequence);
        measure(out, "sampling and evaluation mismatches", other, 0.0);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_marks_failures() {
        let mut c = run(1, "demo", 1.0, |out| {
            measure(out, "x", 2.0, 1.0);
            Ok(())
        });
        assert!(!c.passed());
        assert!(c.summary().starts_with("[FAIL]  1 demo:"));
        c.measures[0].value = 0.5;
        assert!(c.passed());
        c.seconds = 2.0;
        assert!(!c.passed());
    }

    #[test]
    fn errors_and_nan_fail() {
        let c = run(2, "err", 10.0, |_| Err(Error::arg("boom")));
        assert!(!c.passed());
        assert!(c.summary().contains("boom"));
        let c = run(2, "nan", 10.0, |out| {
            measure(out, "v", worst(0.0, f64::NAN), 1.0);
            Ok(())
        });
        assert!(!c.passed());
    }
}
