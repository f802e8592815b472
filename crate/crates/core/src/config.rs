//! JSON run configuration. Every field has a default and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::PolicyConfig;
use crate::env::{EnvSpec, ObjectWorld};
use crate::error::{Error, Result};
use crate::tensor::Precision;
use crate::world_model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvadeMode {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub iterations: usize,
    pub real_steps: usize,
    pub sim_steps: usize,
    pub model_steps_first: usize,
    pub model_steps_rest: usize,
    pub rollout_horizon: usize,
    pub update_frequency: usize,
    pub eval_episodes: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            real_steps: 200,
            sim_steps: 5000,
            model_steps_first: 2000,
            model_steps_rest: 500,
            rollout_horizon: 16,
            update_frequency: 250,
            eval_episodes: 5,
        }
    }
}

impl LoopConfig {
    /// Real environment steps over the whole run.
    pub fn real_budget(&self) -> usize {
        self.iterations * self.real_steps
    }

    pub fn model_steps(&self, iteration: usize) -> usize {
        if iteration == 1 {
            self.model_steps_first
        } else {
            self.model_steps_rest
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub evade: EvadeMode,
    pub precision: Precision,
    pub env: EnvSpec,
    pub model: ModelConfig,
    #[serde(rename = "loop")]
    pub schedule: LoopConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            evade: EvadeMode::On,
            precision: Precision::Single,
            env: EnvSpec::default(),
            model: ModelConfig::default(),
            schedule: LoopConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        ObjectWorld::new(self.env.clone())?;
        let l = &self.schedule;
        let positive = [
            ("iterations", l.iterations),
            ("real_steps", l.real_steps),
            ("sim_steps", l.sim_steps),
            ("model_steps_first", l.model_steps_first),
            ("model_steps_rest", l.model_steps_rest),
            ("rollout_horizon", l.rollout_horizon),
            ("update_frequency", l.update_frequency),
            ("eval_episodes", l.eval_episodes),
            ("policy.epochs", self.policy.epochs),
            ("policy.minibatch_size", self.policy.minibatch_size),
            ("policy.sim_envs", self.policy.sim_envs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.policy.clip_ratio) || !(0.0..=1.0).contains(&self.policy.discount) {
            return Err(Error::Config("clip_ratio must be in [0,1) and discount in [0,1]".into()));
        }
        Ok(())
    }

    /// Model config with the noise switch taken from `evade`.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig { noise: self.evade == EvadeMode::On, ..self.model.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sede": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loop": {"iterations": 2, "bogus": 1}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig { evade: EvadeMode::Off, seed: 3, ..RunConfig::default() };
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(RunConfig::from_json(r#"{"loop": {"real_steps": 0}}"#).is_err());
    }
}
