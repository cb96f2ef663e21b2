//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export has a plain Rust counterpart returning `Result<_, String>`
//! so the logic is testable off the browser.

use wasm_bindgen::prelude::*;

use sedd_core::losses::loss_landscape;
use sedd_core::oracle::{EnumeratedDist, ExactScoreModel};
use sedd_core::process::{Diffusion, NoiseSchedule, TransitionSpec};
use sedd_core::samplers::{empirical_distribution, sample_many, PromptSpec, SamplerConfig, SamplerMethod};

fn spec_for(absorbing: bool, n: usize) -> Result<TransitionSpec, String> {
    let spec = if absorbing {
        TransitionSpec::absorbing(n)
    } else {
        TransitionSpec::uniform(n)
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn diffusion_for(spec: TransitionSpec) -> Diffusion {
    let schedule = if spec.is_absorbing() {
        NoiseSchedule::log_linear(1e-3)
    } else {
        NoiseSchedule::default()
    };
    Diffusion::new(spec, schedule)
}

/// Flattened `(s, csm, se)` triples.
pub fn landscape_table(a: f64, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, String> {
    let rows = loss_landscape(lo, hi, points, a).map_err(|e| e.to_string())?;
    Ok(rows.iter().flat_map(|r| [r.s, r.csm, r.se]).collect())
}

/// Row-major `m × m` kernel at time `t`: entry `(src, dest)` is the
/// probability of moving from `src` to `dest`. The last element is `σ̄(t)`.
pub fn kernel_table(absorbing: bool, n: usize, t: f64) -> Result<Vec<f64>, String> {
    let spec = spec_for(absorbing, n)?;
    let sb = diffusion_for(spec).schedule.sigma_bar(t).map_err(|e| e.to_string())?;
    let m = spec.num_states();
    let mut out = Vec::with_capacity(m * m + 1);
    for src in 0..m {
        out.extend(spec.transition_column(sb, src).map_err(|e| e.to_string())?);
    }
    out.push(sb);
    Ok(out)
}

/// Samples a single token with exact scores of `probs` and returns the
/// empirical histogram over ordinary tokens.
pub fn toy_histogram(
    absorbing: bool,
    probs: &[f64],
    euler: bool,
    steps: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let n = probs.len();
    let spec = spec_for(absorbing, n)?;
    let p = EnumeratedDist::from_weights(n, 1, probs.to_vec()).map_err(|e| e.to_string())?;
    let model = ExactScoreModel::new(&p, spec).map_err(|e| e.to_string())?;
    let config = SamplerConfig {
        method: if euler { SamplerMethod::Euler } else { SamplerMethod::Tweedie },
        steps,
        seed,
        ..SamplerConfig::default()
    };
    let diffusion = diffusion_for(spec);
    let samples =
        sample_many(&model, &diffusion, &config, 1, &PromptSpec::empty(), count).map_err(|e| e.to_string())?;
    let hist = empirical_distribution(&samples, spec.num_states(), 1).map_err(|e| e.to_string())?;
    Ok(hist[..n].to_vec())
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn landscape(a: f64, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, JsValue> {
    js(landscape_table(a, lo, hi, points))
}

#[wasm_bindgen]
pub fn forward_kernel(absorbing: bool, n: usize, t: f64) -> Result<Vec<f64>, JsValue> {
    js(kernel_table(absorbing, n, t))
}

#[wasm_bindgen]
pub fn toy_sample(
    absorbing: bool,
    probs: Vec<f64>,
    euler: bool,
    steps: usize,
    count: usize,
    seed: u32,
) -> Result<Vec<f64>, JsValue> {
    js(toy_histogram(absorbing, &probs, euler, steps, count, seed as u64))
}
