use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use sedd_core::config::RunConfig;
use sedd_core::corpus::{gen_iid, gen_markov, tokenize_chars, detokenize, Corpus, Vocab};
use sedd_core::likelihood::corpus_eval;
use sedd_core::losses::loss_landscape;
use sedd_core::process::TransitionKind;
use sedd_core::samplers::{sample_many, PromptSpec, SamplerConfig, SamplerMethod, TimeGrid};
use sedd_core::scores::{AnyModel, ModelDescriptor};
use sedd_core::training::{train, Checkpoint, TrainData};
use sedd_core::verify::{run_suite, Check, Scope, VERIFY_SEED};
use sedd_core::Error;

use crate::{
    BackendArg, Cli, Command, CorpusKind, EvalArgs, GenCorpusArgs, GridArg, InitArgs, KindArg, LandscapeArgs,
    MethodArg, SamplingArgs, TrainArgs, VerifyArgs,
};

pub const OUTPUT_DIR_ENV: &str = "SEDD_OUTPUT_DIR";

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Verify { failed: usize, total: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Verify { failed, total } => write!(f, "{failed} of {total} checks failed"),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Verify { .. } => 5,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Argument(_) | Error::Capacity { .. } => 3,
                Error::Io { .. } | Error::Checkpoint(_) | Error::Ingestion(_) => 4,
                Error::NumericalAbort { .. } => 6,
                _ => 1,
            },
        }
    }
}

type Outcome = Result<(), Failure>;

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Init(a) => init(a),
        Command::GenCorpus(a) => gen_corpus(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Sample(a) => sample_cmd(&a.sampling, None, cli.seed),
        Command::Infill(a) => sample_cmd(&a.sampling, Some(&a.prompt), cli.seed),
        Command::Eval(a) => eval(a, cli.seed),
        Command::Verify(a) => verify(a, cli.seed),
        Command::Landscape(a) => landscape(a),
    }
}

/// `SEDD_OUTPUT_DIR` if set, otherwise `fallback`.
fn output_dir(fallback: &Path) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.to_path_buf())
}

fn output_path(explicit: &Option<PathBuf>, fallback_dir: &Path, name: &str) -> Result<PathBuf, Error> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => output_dir(fallback_dir).join(name),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    Ok(path)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn json_line<T: Serialize>(w: &mut impl Write, value: &T, path: &Path) -> Result<(), Error> {
    let line = serde_json::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| io_error(path, e))
}

fn parse_floats(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("{s:?} is not a number")))
        })
        .collect()
}

fn init(a: &InitArgs) -> Outcome {
    let kind = match a.kind {
        KindArg::Uniform => TransitionKind::Uniform,
        KindArg::Absorbing => TransitionKind::Absorbing,
    };
    let mut cfg = RunConfig::new(kind, a.tokens, a.seq_len);
    cfg.model = match (a.backend, cfg.model.clone()) {
        (BackendArg::Mlp, m) => m,
        (BackendArg::MeanMlp, ModelDescriptor::Mlp(mlp)) => ModelDescriptor::MeanMlp {
            mlp,
            process: cfg.diffusion.process,
        },
        (BackendArg::Tabular, m) => ModelDescriptor::Tabular {
            num_states: m.num_states(),
            seq_len: a.seq_len,
            absorbing: m.absorbing(),
        },
        (_, m) => m,
    };
    cfg.data.train = a.train.clone();
    cfg.data.valid = a.valid.clone();
    cfg.validate()?;
    let path = output_path(&Some(a.out.clone()), Path::new("."), "")?;
    cfg.save(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Next-token rows that favour `i + 1`.
fn banded_transition(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row = vec![0.4 / n as f64; n];
            row[(i + 1) % n] += 0.6;
            row
        })
        .collect()
}

fn gen_corpus(a: &GenCorpusArgs, seed: Option<u64>) -> Outcome {
    let seed = seed.unwrap_or(0);
    let uniform = vec![1.0 / a.tokens as f64; a.tokens];
    let probs = a.probs.as_deref().map(parse_floats).transpose()?;
    let out = output_path(&a.out, Path::new("."), "corpus.bin")?;
    let corpus = match a.kind {
        CorpusKind::Iid => gen_iid(a.tokens, a.seq_len, probs.as_deref().unwrap_or(&uniform), a.count, seed)?,
        CorpusKind::Markov => {
            let transition = match &a.transition {
                Some(t) => t.split(';').map(parse_floats).collect::<Result<Vec<_>, _>>()?,
                None => banded_transition(a.tokens),
            };
            gen_markov(
                a.tokens,
                a.seq_len,
                probs.as_deref().unwrap_or(&uniform),
                &transition,
                a.count,
                seed,
            )?
        }
        CorpusKind::Text => {
            let src = a
                .text
                .as_ref()
                .ok_or_else(|| Error::Argument("text corpora need --text".into()))?;
            let text = std::fs::read_to_string(src).map_err(|e| io_error(src, e))?;
            let vocab = match &a.vocab {
                Some(v) => Vocab::load(v)?,
                None => {
                    let v = Vocab::from_text(&text)?;
                    let vpath = out.with_extension("vocab");
                    v.save(&vpath)?;
                    info!("wrote {}", vpath.display());
                    v
                }
            };
            tokenize_chars(&text, &vocab, a.seq_len, None)?
        }
    };
    let (train_part, valid_part) = match &a.valid_out {
        Some(_) => {
            let (t, v) = corpus.split(a.valid_fraction)?;
            (t, Some(v))
        }
        None => (corpus, None),
    };
    train_part.save(&out)?;
    info!("wrote {} sequences to {}", train_part.len(), out.display());
    if let (Some(path), Some(v)) = (&a.valid_out, valid_part) {
        let path = output_path(&Some(path.clone()), Path::new("."), "")?;
        v.save(&path)?;
        info!("wrote {} sequences to {}", v.len(), path.display());
    }
    Ok(())
}

/// Paths inside a configuration are relative to the configuration file.
fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    config.parent().map(|d| d.join(p)).unwrap_or_else(|| p.to_path_buf())
}

#[derive(Serialize)]
struct MetricsRow {
    step: u64,
    loss: f64,
    grad_norm: f64,
    lr: f64,
}

#[derive(Serialize)]
struct TimingRow {
    step: u64,
    wall_time: f64,
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> Outcome {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("configuration has no training corpus (data.train)".into()))?;
    let train_set = Corpus::load(&relative_to(&a.config, train_path))?;
    let valid_set = cfg
        .data
        .valid
        .as_ref()
        .map(|p| Corpus::load(&relative_to(&a.config, p)))
        .transpose()?;

    let dir = output_dir(&relative_to(&a.config, &cfg.output_dir));
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    cfg.save(&dir.join("config.toml"))?;
    let metrics_path = dir.join("metrics.jsonl");
    let timing_path = dir.join("timing.jsonl");
    let mut metrics = create(&metrics_path)?;
    let mut timing = create(&timing_path)?;
    let mut write_err = None;
    let every = (cfg.train.steps / 10).max(1);

    let model: AnyModel = cfg.model.init(cfg.train.seed)?;
    info!(
        "training {} parameters for {} steps on {} sequences",
        sedd_core::TrainableScore::params(&model).len(),
        cfg.train.steps,
        train_set.len()
    );
    let result = train(
        model,
        &cfg.diffusion,
        &cfg.train,
        TrainData::Corpus {
            train: &train_set,
            valid: valid_set.as_ref(),
        },
        &mut |m| {
            let row = MetricsRow {
                step: m.step,
                loss: m.loss,
                grad_norm: m.grad_norm,
                lr: m.lr,
            };
            let t = TimingRow {
                step: m.step,
                wall_time: m.wall_time,
            };
            if write_err.is_none() {
                write_err = json_line(&mut metrics, &row, &metrics_path)
                    .and_then(|_| json_line(&mut timing, &t, &timing_path))
                    .err();
            }
            if m.step % every == 0 {
                info!("step {} loss {:.5} grad norm {:.3}", m.step, m.loss, m.grad_norm);
            }
        },
    );
    metrics.flush().map_err(|e| io_error(&metrics_path, e))?;
    timing.flush().map_err(|e| io_error(&timing_path, e))?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let outcome = result?;

    let valid_path = dir.join("validation.jsonl");
    let mut vw = create(&valid_path)?;
    for r in &outcome.validation {
        json_line(&mut vw, r, &valid_path)?;
    }
    vw.flush().map_err(|e| io_error(&valid_path, e))?;

    let ck_path = dir.join("checkpoint.sedd");
    Checkpoint::from_outcome(&outcome, &cfg.diffusion, &cfg.train).save(&ck_path)?;
    info!("wrote {}", ck_path.display());
    Ok(())
}

fn load_model(path: &Path, raw: bool) -> Result<(Checkpoint, AnyModel), Error> {
    let ck = Checkpoint::load(path)?;
    let model = if raw { ck.raw_model()? } else { ck.ema_model()? };
    Ok((ck, model))
}

fn sampler_config(a: &SamplingArgs, seed: Option<u64>) -> Result<SamplerConfig, Error> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.sampling,
        None => SamplerConfig::default(),
    };
    if let Some(m) = a.method {
        cfg.method = match m {
            MethodArg::Euler => SamplerMethod::Euler,
            MethodArg::Tweedie => SamplerMethod::Tweedie,
            MethodArg::ExactTweedie => SamplerMethod::ExactTweedie,
        };
    }
    if let Some(g) = a.grid {
        cfg.grid = match g {
            GridArg::Uniform => TimeGrid::Uniform,
            GridArg::GeometricSigma => TimeGrid::GeometricSigma,
        };
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if a.no_final_denoise {
        cfg.final_denoise = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sample_cmd(a: &SamplingArgs, prompt: Option<&str>, seed: Option<u64>) -> Outcome {
    let config = sampler_config(a, seed)?;
    if a.num_samples == 0 {
        return Err(Error::Config("--num-samples must be positive".into()).into());
    }
    let (ck, model) = load_model(&a.checkpoint, a.raw)?;
    let spec = ck.diffusion.process;
    let d = ck.model.seq_len();
    let prompt = match prompt {
        Some(text) => PromptSpec::parse(text, d, spec.n)?,
        None => PromptSpec::empty(),
    };
    let vocab = a.vocab.as_ref().map(|p| Vocab::load(p)).transpose()?;
    let samples = sample_many(&model, &ck.diffusion, &config, d, &prompt, a.num_samples)?;
    let name = if prompt.is_empty() { "samples.txt" } else { "infill.txt" };
    let out = output_path(&a.out, Path::new("."), name)?;
    let mut w = create(&out)?;
    let mut clipped = 0.0;
    for s in &samples {
        clipped += s.clipped_mass;
        let line = match &vocab {
            Some(v) => detokenize(&s.tokens, v),
            None => s.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
        };
        writeln!(w, "{line}").map_err(|e| io_error(&out, e))?;
    }
    w.flush().map_err(|e| io_error(&out, e))?;
    info!(
        "wrote {} samples to {} (mean clipped mass {:.3e})",
        samples.len(),
        out.display(),
        clipped / samples.len() as f64
    );
    Ok(())
}

fn eval(a: &EvalArgs, seed: Option<u64>) -> Outcome {
    let (ck, model) = load_model(&a.checkpoint, a.raw)?;
    let corpus = Corpus::load(&a.corpus)?;
    if corpus.num_tokens() != ck.diffusion.process.n || corpus.seq_len() != ck.model.seq_len() {
        return Err(Error::Config(format!(
            "corpus has {} tokens and length {}; checkpoint expects {} and {}",
            corpus.num_tokens(),
            corpus.seq_len(),
            ck.diffusion.process.n,
            ck.model.seq_len()
        ))
        .into());
    }
    if a.mc_samples == 0 {
        return Err(Error::Config("--mc-samples must be positive".into()).into());
    }
    let report = corpus_eval(&model, &corpus, &ck.diffusion, a.mc_samples, seed.unwrap_or(0))?;
    let out = output_path(&a.out, Path::new("."), "eval.json")?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    write_all(&out, format!("{text}\n").as_bytes())?;
    info!(
        "bound {:.4} ± {:.4} nats per sequence, {:.4} bits per token; wrote {}",
        report.nll_bound,
        report.stderr,
        report.bits_per_token,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CheckRecord<'a> {
    criterion: u8,
    name: &'a str,
    passed: bool,
    measures: &'a [sedd_core::verify::Measure],
    error: &'a Option<String>,
}

fn verify(a: &VerifyArgs, seed: Option<u64>) -> Outcome {
    let scope = if a.full { Scope::Full } else { Scope::Oracle };
    let checks: Vec<Check> = run_suite(scope, seed.unwrap_or(VERIFY_SEED), &mut |c| println!("{}", c.summary()));
    let records: Vec<CheckRecord> = checks
        .iter()
        .map(|c| CheckRecord {
            criterion: c.criterion,
            name: &c.name,
            passed: c.passed(),
            measures: &c.measures,
            error: &c.error,
        })
        .collect();
    let out = output_path(&a.out, Path::new("."), "verify.json")?;
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::Config(e.to_string()))?;
    write_all(&out, format!("{text}\n").as_bytes())?;
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(Failure::Verify {
            failed,
            total: checks.len(),
        });
    }
    Ok(())
}

fn landscape(a: &LandscapeArgs) -> Outcome {
    let rows = loss_landscape(a.lo, a.hi, a.points, a.a)?;
    let mut text = String::from("s\tcsm\tse\n");
    for r in rows {
        text.push_str(&format!("{}\t{}\t{}\n", r.s, r.csm, r.se));
    }
    match &a.out {
        None if std::env::var_os(OUTPUT_DIR_ENV).is_none() => print!("{text}"),
        _ => {
            let out = output_path(&a.out, Path::new("."), "landscape.tsv")?;
            write_all(&out, text.as_bytes())?;
            info!("wrote {}", out.display());
        }
    }
    Ok(())
}
