use super::{discrete, EnvError, EnvSpec, StepResult};
use crate::policies::Action;

/// Repeated cooperative stage game.
///
/// Observation is the agent one-hot; the global state is a constant token.
#[derive(Clone, Debug)]
pub struct MatrixGame {
    n_agents: usize,
    actions: usize,
    payoff: Vec<f64>,
    length: usize,
    t: usize,
}

impl MatrixGame {
    pub fn new(spec: &EnvSpec) -> Result<Self, EnvError> {
        let actions = spec
            .actions
            .ok_or_else(|| EnvError::InvalidSpec("matrix needs `actions`".into()))?;
        let payoff = spec
            .payoff
            .clone()
            .ok_or_else(|| EnvError::InvalidSpec("matrix needs `payoff`".into()))?;
        if actions == 0 {
            return Err(EnvError::InvalidSpec("zero actions".into()));
        }
        let want = u32::try_from(spec.n_agents)
            .ok()
            .and_then(|n| actions.checked_pow(n))
            .ok_or_else(|| EnvError::InvalidSpec("payoff tensor too large".into()))?;
        if payoff.len() != want {
            return Err(EnvError::InvalidSpec(format!(
                "payoff has {} entries, expected {actions}^{} = {want}",
                payoff.len(),
                spec.n_agents
            )));
        }
        if payoff.iter().any(|p| !p.is_finite()) {
            return Err(EnvError::InvalidSpec("non-finite payoff".into()));
        }
        Ok(Self {
            n_agents: spec.n_agents,
            actions,
            payoff,
            length: spec.episode_length,
            t: 0,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_actions(&self) -> usize {
        self.actions
    }

    pub fn obs_dim(&self) -> usize {
        self.n_agents
    }

    pub fn episode_length(&self) -> usize {
        self.length
    }

    pub fn payoff(&self, joint: &[usize]) -> f64 {
        let idx = joint.iter().fold(0, |acc, &a| acc * self.actions + a);
        self.payoff[idx]
    }

    fn observe(&self, reward: f64, done: bool) -> StepResult {
        let obs = (0..self.n_agents)
            .map(|i| (0..self.n_agents).map(|k| if k == i { 1.0 } else { 0.0 }).collect())
            .collect();
        StepResult {
            obs,
            state: vec![1.0],
            reward,
            done,
        }
    }

    pub fn reset(&mut self) -> StepResult {
        self.t = 0;
        self.observe(0.0, false)
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult, EnvError> {
        if self.t >= self.length {
            return Err(EnvError::Finished);
        }
        let joint = actions
            .iter()
            .enumerate()
            .map(|(i, a)| discrete(i, a, self.actions))
            .collect::<Result<Vec<_>, _>>()?;
        let r = self.payoff(&joint);
        self.t += 1;
        Ok(self.observe(r, self.t == self.length))
    }

    pub fn optimal_return(&self) -> f64 {
        let best = self.payoff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        best * self.length as f64
    }
}
