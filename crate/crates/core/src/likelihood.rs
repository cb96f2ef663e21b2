//! Upper bounds on the negative log-likelihood, and exact values where the
//! sequence space is small enough to enumerate.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::losses::{dwdse, prior_kl, Estimate, UniformTime};
use crate::oracle::{exact_reverse_solve, ReverseSolveOptions};
use crate::process::Diffusion;
use crate::scores::ScoreModel;

/// Default number of time draws per sequence.
pub const DEFAULT_MC_SAMPLES: usize = 1000;

/// Decorrelates per-item seeds drawn from one run seed.
pub fn derive_seed(seed: u64, item: u64) -> u64 {
    let mut z = seed ^ item.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `dwdse(x0) + prior_kl(x0)` in nats, with the Monte Carlo standard error
/// of the first term.
pub fn nll_bound<M: ScoreModel + ?Sized>(
    model: &M,
    x0: &[usize],
    diffusion: &Diffusion,
    mc_samples: usize,
    seed: u64,
) -> Result<Estimate> {
    diffusion.validate()?;
    let sampler = UniformTime::new(diffusion.t_min)?;
    let est = dwdse(
        model,
        x0,
        &diffusion.process,
        &diffusion.schedule,
        &sampler,
        mc_samples,
        seed,
    )?;
    let prior = prior_kl(x0, &diffusion.process, &diffusion.schedule, diffusion.leakage)?;
    Ok(Estimate {
        mean: est.mean + prior,
        ..est
    })
}

/// `-log p^θ(x0)` of the model's reverse process, by integrating it over
/// the whole sequence space. Capacity-gated.
pub fn exact_nll<M: ScoreModel + ?Sized>(
    model: &M,
    x0: &[usize],
    diffusion: &Diffusion,
    steps: usize,
) -> Result<f64> {
    let mut opts = ReverseSolveOptions::new(steps, diffusion.t_min);
    opts.leakage = diffusion.leakage;
    let sol = exact_reverse_solve(model, &diffusion.process, &diffusion.schedule, x0.len(), opts)?;
    Ok(-sol.dist.prob(x0).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub seq_len: usize,
    pub mc_samples: usize,
    /// Mean bound per sequence, nats.
    pub nll_bound: f64,
    /// Monte Carlo standard error of `nll_bound`.
    pub stderr: f64,
    pub perplexity: f64,
    pub bits_per_token: f64,
    pub per_sequence: Vec<f64>,
}

impl EvalReport {
    fn from_bounds(bounds: &[Estimate], seq_len: usize, mc_samples: usize) -> Self {
        let k = bounds.len() as f64;
        let mean = crate::ordered_sum(bounds.iter().map(|b| b.mean)) / k;
        let var = crate::ordered_sum(bounds.iter().map(|b| b.stderr * b.stderr)) / (k * k);
        let per_token = mean / seq_len as f64;
        Self {
            sequences: bounds.len(),
            seq_len,
            mc_samples,
            nll_bound: mean,
            stderr: var.sqrt(),
            perplexity: per_token.exp(),
            bits_per_token: per_token / std::f64::consts::LN_2,
            per_sequence: bounds.iter().map(|b| b.mean).collect(),
        }
    }
}

/// Likelihood bound over every sequence of `corpus`; sequence `j` uses the
/// seed `derive_seed(seed, j)`.
pub fn corpus_eval<M: ScoreModel + ?Sized>(
    model: &M,
    corpus: &Corpus,
    diffusion: &Diffusion,
    mc_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::arg("cannot evaluate an empty corpus"));
    }
    let bounds = corpus
        .sequences()
        .iter()
        .enumerate()
        .map(|(j, x0)| nll_bound(model, x0, diffusion, mc_samples, derive_seed(seed, j as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_bounds(&bounds, corpus.seq_len(), mc_samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_iid;
    use crate::oracle::{EnumeratedDist, ExactScoreModel};
    use crate::process::{NoiseSchedule, TransitionSpec};
    use crate::scores::TabularScore;

    #[test]
    fn single_sample_is_finite() {
        let diff = Diffusion::new(TransitionSpec::uniform(3), NoiseSchedule::default());
        let model = TabularScore::new(3, 2, false).unwrap();
        let est = nll_bound(&model, &[0, 2], &diff, 1, 0).unwrap();
        assert!(est.mean.is_finite());
        assert!(est.stderr.is_infinite());
    }

    #[test]
    fn identical_sequences_agree_within_noise() {
        let diff = Diffusion::new(TransitionSpec::absorbing(3), NoiseSchedule::default());
        let model = TabularScore::new(4, 2, true).unwrap();
        let corpus = Corpus::new(3, 2, vec![vec![1, 2]; 4]).unwrap();
        let r = corpus_eval(&model, &corpus, &diff, 2000, 1).unwrap();
        let se = r.stderr * 4.0;
        for b in &r.per_sequence {
            assert!((b - r.nll_bound).abs() < 4.0 * se);
        }
    }

    #[test]
    fn report_units() {
        let diff = Diffusion::new(TransitionSpec::uniform(4), NoiseSchedule::default());
        let model = TabularScore::new(4, 2, false).unwrap();
        let corpus = gen_iid(4, 2, &[0.25; 4], 5, 3).unwrap();
        let r = corpus_eval(&model, &corpus, &diff, 50, 2).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((r.perplexity - (r.bits_per_token * ln2).exp()).abs() < 1e-9 * r.perplexity);
        assert!((r.nll_bound / 2.0 - r.bits_per_token * ln2).abs() < 1e-12);
        assert!(corpus_eval(&model, &Corpus::new(4, 2, vec![]).unwrap(), &diff, 5, 0).is_err());
    }

    #[test]
    fn bound_dominates_exact_nll_with_exact_scores() {
        let p = EnumeratedDist::new(3, 2, vec![0.3, 0.05, 0.1, 0.05, 0.2, 0.05, 0.1, 0.05, 0.1]).unwrap();
        for spec in [TransitionSpec::uniform(3), TransitionSpec::absorbing(3)] {
            let diff = Diffusion::new(spec, NoiseSchedule::default());
            let model = ExactScoreModel::new(&p, spec).unwrap();
            for x0 in [[0, 0], [1, 2]] {
                let bound = nll_bound(&model, &x0, &diff, 4000, 5).unwrap();
                let exact = exact_nll(&model, &x0, &diff, 400).unwrap();
                assert!(exact <= bound.mean + 3.0 * bound.stderr, "{:?} {x0:?}", spec.kind);
                assert!((exact + p.prob(&x0).ln()).abs() < 1e-3);
            }
        }
    }
}
