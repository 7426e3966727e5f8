//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::ScheduleConfig;
use crate::env::{EnvConfig, EnvSetup, ACTION_DIM};
use crate::error::{Error, Result};
use crate::learner::AgentConfig;
use crate::plant::PlantConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub total_env_steps: u64,
    /// Environment steps between evaluations and checkpoints.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Evaluations averaged in the `rolling_reward` column.
    pub rolling_window: usize,
    pub seed: u64,
    /// Seeds used by `ablate` when none are given on the command line.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Also write `replay.bin` next to each checkpoint.
    pub save_replay: bool,
    /// Write the per-step reward log `steps.csv`.
    pub step_log: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            total_env_steps: 100_000,
            eval_interval: 5_000,
            eval_episodes: 5,
            rolling_window: 10,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs/train"),
            save_replay: true,
            step_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub plant: PlantConfig,
    pub bsg: ScheduleConfig,
    pub agent: AgentConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        self.agent.validate()?;
        if self.agent.entropy_target != -(ACTION_DIM as f64) {
            return Err(Error::config(
                "agent.entropy_target",
                format!("must equal the negative action dimension -{ACTION_DIM}"),
            ));
        }
        let r = &self.run;
        if r.eval_interval == 0 {
            return Err(Error::config("run.eval_interval", "must be >= 1"));
        }
        if r.eval_episodes == 0 {
            return Err(Error::config("run.eval_episodes", "must be >= 1"));
        }
        if r.rolling_window == 0 {
            return Err(Error::config("run.rolling_window", "must be >= 1"));
        }
        Ok(())
    }

    pub fn setup(&self) -> EnvSetup {
        EnvSetup {
            env: self.env.clone(),
            plant: self.plant.clone(),
            schedule: self.bsg.clone(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            // the message names the offending key and position
            Error::config(
                "config",
                e.to_string().lines().filter(|l| !l.trim().is_empty()).collect::<Vec<_>>().join(" "),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration as `config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::from_toml(&text)
}
