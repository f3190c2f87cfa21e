//! Experiment orchestration: run configs, the training loop, evaluation,
//! diagnostics, plots and the verification suites.

pub mod checkpoint;
mod config;
pub mod diagnostics;
mod eval;
pub mod plot;
mod train;
pub mod verify;

use serde::{Deserialize, Serialize};

pub use config::RunConfig;
pub use diagnostics::{kl_report, matching_degree, write_kl_csv, AgentKl};
pub use eval::{episode_returns, evaluate, evaluate_checkpoint, EvalStats};
pub use train::{read_metrics, train, TrainSummary, CHECKPOINT_DIR, KL_FILE, METRICS_FILE};

use crate::envs::EnvError;
use crate::nn::NnError;
use crate::oracle::OracleError;
use crate::policies::{KlStats, PolicyError};
use crate::rollout::RolloutError;
use crate::updaters::UpdateError;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Empty(String),
    #[error("training diverged at iteration {iteration}: {reason}; last finite parameters saved to {checkpoint}")]
    Diverged {
        iteration: usize,
        reason: String,
        checkpoint: String,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 0 for the evaluation before any update.
    pub iteration: usize,
    pub env_steps: u64,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
    /// Mean undiscounted return of episodes finished while collecting.
    pub train_return: Option<f64>,
    pub condition_met: Option<bool>,
    pub constraint_met: Option<bool>,
    pub matching: Option<bool>,
    pub dependent_step_ran: bool,
    pub kl: Vec<KlStats>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
}

impl MetricRecord {
    pub fn initial(eval_mean: f64, eval_std: f64) -> Self {
        Self {
            iteration: 0,
            env_steps: 0,
            eval_mean: Some(eval_mean),
            eval_std: Some(eval_std),
            train_return: None,
            condition_met: None,
            constraint_met: None,
            matching: None,
            dependent_step_ran: false,
            kl: vec![],
            policy_loss: None,
            value_loss: None,
            entropy: None,
        }
    }
}
