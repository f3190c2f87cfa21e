use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::envs::{Env, EnvKind, EnvSpec};
use crate::policies::CriticInput;
use crate::updaters::{Algo, UpdateConfig};

/// Everything `train` needs. Update hyperparameters sit at the top level of
/// the JSON file under their conventional names (`ppo_clip`, `gae_lamda`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvSpec,
    #[serde(flatten)]
    pub update: UpdateConfig,
    pub hidden_sizes: Vec<usize>,
    pub n_rollout_threads: usize,
    /// Steps each rollout thread takes per iteration.
    pub episode_length: usize,
    /// Budget in environment steps, rounded down to whole iterations.
    pub num_env_steps: u64,
    /// Evaluate every this many iterations; the last iteration is always evaluated.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_env(EnvKind::Matrix)
    }
}

impl RunConfig {
    /// Desk-scale defaults per environment.
    pub fn for_env(kind: EnvKind) -> Self {
        let base = Self {
            env: EnvSpec::default_for(kind),
            update: UpdateConfig::default(),
            hidden_sizes: vec![64, 64],
            n_rollout_threads: 4,
            episode_length: 50,
            num_env_steps: 50_000,
            eval_interval: 1,
            eval_episodes: 32,
            seed: 0,
            output_dir: None,
        };
        match kind {
            EnvKind::Matrix => base,
            EnvKind::Spread => Self {
                episode_length: 60,
                num_env_steps: 300_000,
                eval_interval: 5,
                // Landmarks outside every agent's nearest pair need a lot of
                // exploration; at 0.001 some seeds settle on two of three.
                update: UpdateConfig {
                    entropy_coef: 0.05,
                    ..UpdateConfig::default()
                },
                ..base
            },
            EnvKind::Linereach => Self {
                num_env_steps: 100_000,
                update: UpdateConfig {
                    actor_lr: 1e-3,
                    ..UpdateConfig::default()
                },
                ..base
            },
        }
    }

    /// Keys missing from `text` take the defaults of the environment kind it
    /// names (matrix when there is no `env`).
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let serde_json::Value::Object(given) = serde_json::from_str(text)? else {
            return Err(ExperimentError::Config("run config must be a JSON object".into()));
        };
        let kind = match given.get("env").and_then(|e| e.get("kind")) {
            Some(k) => serde_json::from_value(k.clone())?,
            None => EnvKind::Matrix,
        };
        let serde_json::Value::Object(mut merged) = serde_json::to_value(Self::for_env(kind))? else {
            unreachable!("RunConfig serializes to an object");
        };
        merged.extend(given);
        let cfg: Self = serde_json::from_value(serde_json::Value::Object(merged))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn steps_per_iteration(&self) -> u64 {
        (self.n_rollout_threads * self.episode_length) as u64
    }

    pub fn iterations(&self) -> usize {
        (self.num_env_steps / self.steps_per_iteration()) as usize
    }

    /// Independent learners get per-agent local critics; every other scheme
    /// uses the centralized state value.
    pub fn critic_input(&self) -> CriticInput {
        if self.update.algo == Algo::Ippo {
            CriticInput::Local
        } else {
            CriticInput::Global
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.into()));
        if self.n_rollout_threads == 0 || self.episode_length == 0 {
            return bad("n_rollout_threads and episode_length must be positive");
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("eval_interval and eval_episodes must be positive");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        if self.num_env_steps > 0 && self.iterations() == 0 {
            return bad("num_env_steps is smaller than one iteration");
        }
        let u = &self.update;
        let positive = [u.clip, u.ppo_epochs as f64, u.num_mini_batch as f64, u.adam_eps, u.max_grad_norm, u.huber_delta];
        if positive.iter().any(|v| !(*v > 0.0)) || !(0.0..=1.0).contains(&u.gamma) || !(0.0..=1.0).contains(&u.gae_lamda) {
            return bad("update hyperparameters out of range");
        }
        if u.actor_lr < 0.0 || u.critic_lr < 0.0 || u.entropy_coef < 0.0 {
            return bad("learning rates and entropy coefficient must be non-negative");
        }
        u.validate()?;
        Env::new(&self.env)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_names_round_trip() {
        let cfg = RunConfig::for_env(EnvKind::Spread);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"gae_lamda\":0.95"));
        assert!(text.contains("\"ppo_clip\":0.2"));
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"algo": "happo", "ppo_epochs": 3}"#).unwrap();
        assert_eq!(cfg.update.algo, Algo::Happo);
        assert_eq!(cfg.update.ppo_epochs, 3);
        assert_eq!(cfg.update.gamma, 0.99);
        assert_eq!(cfg.eval_episodes, 32);
    }

    #[test]
    fn defaults_follow_the_env_kind() {
        let spread = serde_json::to_string(&EnvSpec::default_for(EnvKind::Spread)).unwrap();
        let cfg = RunConfig::from_json(&format!(r#"{{"env": {spread}, "seed": 4}}"#)).unwrap();
        let expected = RunConfig {
            seed: 4,
            ..RunConfig::for_env(EnvKind::Spread)
        };
        assert_eq!(cfg, expected);
        assert!(RunConfig::from_json("[1, 2]").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            r#"{"eval_episodes": 0}"#,
            r#"{"n_rollout_threads": 0}"#,
            r#"{"num_env_steps": 10}"#,
            r#"{"ppo_clip": -0.1}"#,
            r#"{"algo": "coppo", "sharing": "none"}"#,
        ] {
            assert!(RunConfig::from_json(text).is_err(), "{text}");
        }
    }
}
