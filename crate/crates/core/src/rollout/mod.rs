//! On-policy data: collection, GAE, advantage normalization and splitting,
//! and mini-batch partitions.
//!
//! Time index is worker-major: step `h` of worker `w` lives at `w * horizon + h`.

mod collect;

use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use collect::Collector;

use crate::envs::EnvError;
use crate::nn::Tensor;
use crate::oracle::dirichlet_uniform;
use crate::policies::{Action, CriticNet, PolicyEnsemble, PolicyError};

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("worker {worker}: {source}")]
    Env {
        worker: usize,
        #[source]
        source: EnvError,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid rollout request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Average,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub n_workers: usize,
    pub horizon: usize,
    pub n_agents: usize,
    /// `[t]`
    pub states: Vec<Vec<f64>>,
    /// `[agent][t]`
    pub obs: Vec<Vec<Vec<f64>>>,
    /// `[agent][t]`
    pub actions: Vec<Vec<Action>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Log-probabilities under the collecting parameters, `[agent][t]`.
    pub old_logp: Vec<Vec<f64>>,
    /// Critic values, `[stream][t]`.
    pub values: Vec<Vec<f64>>,
    /// Value of the state after each worker's last step, `[stream][worker]`.
    /// Zero when that step ended an episode.
    pub bootstrap: Vec<Vec<f64>>,
    /// Value targets, `[stream][t]`.
    pub returns: Vec<Vec<f64>>,
    /// Raw joint advantages, `[stream][t]`.
    pub adv: Vec<Vec<f64>>,
    /// Normalized joint advantages, `[stream][t]`.
    pub adv_norm: Vec<Vec<f64>>,
    /// Per-agent split of the normalized joint advantage, `[agent][t]`.
    pub adv_split: Vec<Vec<f64>>,
    /// Undiscounted returns of episodes that finished during collection.
    pub episode_returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn streams(&self) -> usize {
        self.values.len()
    }

    /// Rollout size in agent-timesteps.
    pub fn rollout_size(&self) -> usize {
        self.len() * self.n_agents
    }

    /// Critic stream that scores `agent`.
    pub fn stream_of(&self, agent: usize) -> usize {
        agent.min(self.streams() - 1)
    }

    /// Normalized joint advantage as seen by `agent`.
    pub fn joint_adv(&self, agent: usize) -> &[f64] {
        &self.adv_norm[self.stream_of(agent)]
    }

    /// Policy network inputs for every agent over the whole buffer.
    pub fn agent_inputs(&self, ens: &PolicyEnsemble) -> Result<Vec<Tensor>, PolicyError> {
        (0..self.n_agents).map(|i| ens.agent_input(i, &self.obs[i])).collect()
    }

    /// Critic inputs per stream over the whole buffer.
    pub fn critic_inputs(&self, critic: &CriticNet) -> Result<Vec<Tensor>, PolicyError> {
        (0..critic.streams())
            .map(|s| match critic.input_kind() {
                crate::policies::CriticInput::Global => critic.stream_input(s, &self.states),
                crate::policies::CriticInput::Local => critic.stream_input(s, &self.obs[s]),
            })
            .collect()
    }

    /// Debug dump: one row per (worker, t, agent).
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "worker,t,agent,action,reward,value,adv,adv_i")?;
        for t in 0..self.len() {
            let (w, h) = (t / self.horizon, t % self.horizon);
            for i in 0..self.n_agents {
                let a = match &self.actions[i][t] {
                    Action::Discrete(k) => k.to_string(),
                    Action::Continuous(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
                };
                let s = self.stream_of(i);
                let adv_i = self.adv_split.get(i).and_then(|v| v.get(t)).copied().unwrap_or(f64::NAN);
                writeln!(
                    out,
                    "{w},{h},{i},{a},{},{},{},{adv_i}",
                    self.rewards[t], self.values[s][t], self.adv_norm.get(s).and_then(|v| v.get(t)).copied().unwrap_or(f64::NAN)
                )?;
            }
        }
        Ok(())
    }
}

/// Generalized advantage estimation per worker segment and stream.
///
/// Fills `adv` and `returns = adv + values`. Episodes are cut at `done`.
pub fn gae(buf: &mut RolloutBuffer, gamma: f64, lambda: f64) {
    let streams = buf.streams();
    buf.adv = vec![vec![0.0; buf.len()]; streams];
    buf.returns = vec![vec![0.0; buf.len()]; streams];
    for s in 0..streams {
        for w in 0..buf.n_workers {
            let mut carry = 0.0;
            for h in (0..buf.horizon).rev() {
                let t = w * buf.horizon + h;
                let live = if buf.dones[t] { 0.0 } else { 1.0 };
                let next_v = if h + 1 == buf.horizon {
                    buf.bootstrap[s][w]
                } else {
                    buf.values[s][t + 1]
                };
                let delta = buf.rewards[t] + gamma * next_v * live - buf.values[s][t];
                carry = delta + gamma * lambda * live * carry;
                buf.adv[s][t] = carry;
                buf.returns[s][t] = carry + buf.values[s][t];
            }
        }
    }
}

/// Standardizes over the buffer with `1e-5` in the denominator; a zero
/// variance only removes the mean.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        xs.iter().map(|x| x - mean).collect()
    } else {
        let sd = var.sqrt();
        xs.iter().map(|x| (x - mean) / (sd + 1e-5)).collect()
    }
}

/// Normalizes every stream, then splits the first stream across agents.
pub fn normalize_then_split(buf: &mut RolloutBuffer, rule: SplitKind, rng: &mut ChaCha8Rng) {
    buf.adv_norm = buf.adv.iter().map(|a| normalize(a)).collect();
    let n = buf.n_agents;
    let mut split = vec![vec![0.0; buf.len()]; n];
    for t in 0..buf.len() {
        let joint = buf.adv_norm[0][t];
        match rule {
            SplitKind::Average => {
                for col in split.iter_mut() {
                    col[t] = joint / n as f64;
                }
            }
            SplitKind::Random => {
                let w = dirichlet_uniform(n, rng);
                let mut acc = 0.0;
                for (i, col) in split.iter_mut().enumerate().take(n - 1) {
                    col[t] = w[i] * joint;
                    acc += col[t];
                }
                split[n - 1][t] = joint - acc;
            }
        }
    }
    buf.adv_split = split;
}

/// Shuffled partition of `0..n` into `count` near-equal batches.
pub fn minibatches(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>, RolloutError> {
    if count == 0 || count > n {
        return Err(RolloutError::Invalid(format!("{count} mini-batches from {n} steps")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (base, extra) = (n / count, n % count);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let len = base + usize::from(b < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}
