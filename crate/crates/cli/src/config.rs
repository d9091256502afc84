use std::path::{Path, PathBuf};

use optgym::agent::{ActionSpaceKind, NetConfig, PPOConfig, TrainConfig};
use optgym::dataset::DatasetConfig;
use optgym::interp::MeasureConfig;
use optgym::search::SearchConstraints;
use optgym::{Backend, CostConfig, EnvLimits, RewardMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Analytic,
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Holds `train.jsonl` and `validation.jsonl`.
    pub data_dir: PathBuf,
    /// Checkpoints and training logs.
    pub run_dir: PathBuf,
    /// Evaluation CSVs and summaries.
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            run_dir: "run".into(),
            report_dir: "report".into(),
        }
    }
}

impl Paths {
    pub fn train_set(&self) -> PathBuf {
        self.data_dir.join("train.jsonl")
    }

    pub fn validation_set(&self) -> PathBuf {
        self.data_dir.join("validation.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.run_dir.join("policy.ckpt")
    }
}

/// Everything a run depends on. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub limits: EnvLimits,
    pub ppo: PPOConfig,
    pub net: NetConfig,
    pub cost: CostConfig,
    pub measure: MeasureConfig,
    pub backend: BackendKind,
    pub reward_mode: RewardMode,
    pub action_space: ActionSpaceKind,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub search: SearchConstraints,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            limits: EnvLimits::default(),
            ppo: PPOConfig::default(),
            net: NetConfig::default(),
            cost: CostConfig::default(),
            measure: MeasureConfig::default(),
            backend: BackendKind::default(),
            reward_mode: RewardMode::default(),
            action_space: ActionSpaceKind::default(),
            seed: 0,
            dataset: DatasetConfig::default(),
            search: SearchConstraints::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn backend(&self) -> Backend {
        match self.backend {
            BackendKind::Analytic => Backend::Analytic(self.cost),
            BackendKind::Measured => Backend::Measured(self.measure),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            limits: self.limits,
            net: self.net,
            ppo: self.ppo,
            mode: self.reward_mode,
            space: self.action_space,
            backend: self.backend(),
            seed: self.seed,
        }
    }
}
