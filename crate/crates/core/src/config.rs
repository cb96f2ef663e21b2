//! Declarative run configuration stored as TOML.
//!
//! [`RunConfig::to_toml`] is canonical: parsing its output and serializing
//! again yields the same bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{Diffusion, NoiseSchedule, TransitionKind, TransitionSpec};
use crate::samplers::SamplerConfig;
use crate::scores::{MlpConfig, ModelDescriptor};
use crate::training::TrainConfig;

/// Corpus and vocabulary files, relative to the working directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub diffusion: Diffusion,
    pub model: ModelDescriptor,
    pub train: TrainConfig,
    pub sampling: SamplerConfig,
    #[serde(default)]
    pub data: DataPaths,
}

impl RunConfig {
    /// Small MLP run over `n` tokens and length `d`.
    pub fn new(kind: TransitionKind, n: usize, d: usize) -> Self {
        let process = match kind {
            TransitionKind::Uniform => TransitionSpec::uniform(n),
            TransitionKind::Absorbing => TransitionSpec::absorbing(n),
        };
        let schedule = match kind {
            TransitionKind::Uniform => NoiseSchedule::default(),
            TransitionKind::Absorbing => NoiseSchedule::log_linear(1e-3),
        };
        Self {
            output_dir: PathBuf::from("runs"),
            diffusion: Diffusion::new(process, schedule),
            model: ModelDescriptor::Mlp(MlpConfig {
                seq_len: d,
                num_states: process.num_states(),
                embed_dim: 16,
                hidden: 64,
                noise_features: 8,
                absorbing: kind == TransitionKind::Absorbing,
            }),
            train: TrainConfig::default(),
            sampling: SamplerConfig::default(),
            data: DataPaths::default(),
        }
    }

    /// Checks every section and the agreements between them.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.diffusion.validate().map_err(cfg)?;
        self.train.validate()?;
        self.sampling.validate()?;
        if self.sampling.seed > i64::MAX as u64 {
            return Err(Error::Config("sampling seed must fit in a signed 64-bit integer".into()));
        }
        let process = self.diffusion.process;
        let states = process.num_states();
        if self.model.num_states() != states {
            return Err(Error::Config(format!(
                "model has {} states but the {:?} process over {} tokens has {states}",
                self.model.num_states(),
                process.kind,
                process.n
            )));
        }
        if self.model.absorbing() != (process.kind == TransitionKind::Absorbing) {
            return Err(Error::Config("model absorbing flag disagrees with the process".into()));
        }
        if let ModelDescriptor::MeanMlp { process: p, .. } = &self.model {
            if *p != process {
                return Err(Error::Config("mean model process differs from the diffusion".into()));
            }
        }
        if self.model.seq_len() == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        self.model.param_count().map_err(cfg)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::LossKind;

    #[test]
    fn defaults_validate_and_round_trip() {
        for kind in [TransitionKind::Uniform, TransitionKind::Absorbing] {
            let mut cfg = RunConfig::new(kind, 5, 3);
            cfg.data.train = Some("train.bin".into());
            cfg.train.loss = LossKind::DseFixed { sigma_bar: 0.7 };
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn mean_and_tabular_descriptors_round_trip() {
        let mut cfg = RunConfig::new(TransitionKind::Absorbing, 3, 2);
        let ModelDescriptor::Mlp(mlp) = cfg.model else { unreachable!() };
        cfg.model = ModelDescriptor::MeanMlp {
            mlp,
            process: cfg.diffusion.process,
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        cfg.model = ModelDescriptor::Tabular {
            num_states: 4,
            seq_len: 2,
            absorbing: true,
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap().to_toml().unwrap(), text);
    }

    #[test]
    fn cross_field_checks() {
        let mut cfg = RunConfig::new(TransitionKind::Absorbing, 5, 3);
        if let ModelDescriptor::Mlp(c) = &mut cfg.model {
            c.num_states = 5;
        }
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::new(TransitionKind::Uniform, 5, 3);
        if let ModelDescriptor::Mlp(c) = &mut cfg.model {
            c.absorbing = true;
        }
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::new(TransitionKind::Uniform, 30, 8);
        cfg.model = ModelDescriptor::Tabular {
            num_states: 30,
            seq_len: 8,
            absorbing: false,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::new(TransitionKind::Uniform, 4, 2);
        cfg.sampling.steps = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = RunConfig::new(TransitionKind::Uniform, 4, 2);
        let text = format!("bogus = 1\n{}", cfg.to_toml().unwrap());
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("not toml ["), Err(Error::Config(_))));
    }
}
