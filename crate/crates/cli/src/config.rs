use std::path::{Path, PathBuf};

use actgen::critics::CriticConfig;
use actgen::generator::GeneratorConfig;
use actgen::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// normalized training records (JSON lines)
    pub train: PathBuf,
    pub stats: PathBuf,
    pub vocab: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: "data/train.jsonl".into(),
            stats: "data/stats.json".into(),
            vocab: "data/vocab.txt".into(),
            run_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_caption: usize,
    pub seed: u64,
    /// captions rendered into `samples/` after training
    pub preview_captions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_caption: 5,
            seed: 0,
            preview_captions: 3,
        }
    }
}

/// Everything a training run reads. Every key is optional; unknown keys are
/// rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths are taken relative to the
    /// file's directory and stored absolute, so the echoed config works
    /// from anywhere.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| CliError::Runtime(e.to_string()))?;
        let d = &mut cfg.data;
        for p in [&mut d.train, &mut d.stats, &mut d.vocab, &mut d.run_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        self.critic.validate()?;
        self.train.validate()?;
        if self.eval.samples_per_caption == 0 {
            return Err(CliError::Validation("eval.samples_per_caption must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "[train]\nlearning_rat = 1e-3\n",
            "[trian]\n",
            "[generator]\nnorm_mode = \"layer\"\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(CliError::Validation(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn echo_round_trips() {
        let text = "[generator]\nnorm = \"layer\"\nd = 16\n[train]\nlearning_rate = 1e-3\nseed = 7\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[generator]\nd = 15\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
    }

    #[test]
    fn paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[data]\ntrain = \"d/train.jsonl\"\nrun_dir = \"/abs/run\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train, dir.path().join("d/train.jsonl"));
        assert_eq!(cfg.data.run_dir, PathBuf::from("/abs/run"));
    }
}
