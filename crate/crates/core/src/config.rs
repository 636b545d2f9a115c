//! Experiment configuration, read from a single TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::captions::StrategyPlan;
use crate::cas::CasTrainConfig;
use crate::error::{Error, Result};
use crate::qtd::{NPrimePolicy, QtdConfig};
use crate::synthworld::WorldConfig;
use crate::ve::VeTrainConfig;

/// Candidate counts visited by a sweep, per question type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub yes_no: Vec<usize>,
    pub other: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            yes_no: vec![1, 2, 3],
            other: (1..=12).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub cas: CasTrainConfig,
    pub ve: VeTrainConfig,
    pub qtd: QtdConfig,
    pub plan: StrategyPlan,
    pub policy: NPrimePolicy,
    /// Candidates per question when training the scorer.
    #[serde(rename = "N", alias = "n")]
    pub n: usize,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
}

pub const DEFAULT_N: usize = 12;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            cas: CasTrainConfig::default(),
            ve: VeTrainConfig::default(),
            qtd: QtdConfig::default(),
            plan: StrategyPlan::R_TO_C,
            policy: NPrimePolicy::default(),
            n: DEFAULT_N,
            sweep: SweepConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Reports the first violated constraint.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.cas.validate()?;
        self.ve.validate()?;
        self.qtd.validate()?;
        let vocab = self.world.answer_vocabulary().len();
        if self.n == 0 || self.n > vocab {
            return Err(Error::Config(format!(
                "N = {} must be between 1 and the answer vocabulary size {vocab}",
                self.n
            )));
        }
        self.policy.validate(self.n)?;
        if let Some(bad) = self.sweep.yes_no.iter().chain(&self.sweep.other).find(|&&v| v == 0 || v > self.n) {
            return Err(Error::Config(format!("sweep value {bad} must be between 1 and N = {}", self.n)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.n, 12);
        assert_eq!(cfg.plan, StrategyPlan::R_TO_C);
    }

    #[test]
    fn larger_n_accepted() {
        let cfg = ExperimentConfig::from_toml("N = 16\n").unwrap();
        assert_eq!(cfg.n, 16);
        assert!(ExperimentConfig::from_toml("N = 40\n").unwrap_err().is_config());
    }

    #[test]
    fn policy_above_n_rejected() {
        let text = "N = 14\n[policy]\nn_prime_yes_no = 2\nn_prime_other = 15\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("n_prime_other"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[world]\nnum_imgs = 4\n").is_err());
        assert!(ExperimentConfig::from_toml("epochs = 4\n").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
plan = "R"
[world]
seed = 9
prior_skew = 0.5
[ve]
ssl_enabled = true
alpha = 0.5
[ve.arch]
d_model = 16
hidden = 16
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.world.seed, 9);
        assert_eq!(cfg.plan, StrategyPlan::R);
        assert!(cfg.ve.ssl_enabled);
        assert_eq!(cfg.ve.arch.d_model, 16);
        assert!(ExperimentConfig::from_toml("plan = \"CtoR\"\n").is_err());
    }

    #[test]
    fn load_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        fs::write(&p, "N = 16\n").unwrap();
        assert_eq!(load_config(&p).unwrap().n, 16);
        assert!(load_config(&dir.path().join("missing.toml")).is_err());
    }
}
