//! Desk-scale cooperative environments.
//!
//! All three share one reward per step across agents and terminate exactly at
//! the episode length. Every agent of a given environment observes a vector of
//! the same size so a single shared network can serve all of them.

mod linereach;
mod matrix;
mod spread;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use linereach::LineReach;
pub use matrix::MatrixGame;
pub use spread::Spread;

use crate::policies::Action;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("agent {agent}: action {action} is outside the action space")]
    ActionOutOfRange { agent: usize, action: String },
    #[error("step called on a finished episode")]
    Finished,
    #[error("optimal return unsupported: {0}")]
    Unsupported(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Matrix,
    Spread,
    Linereach,
}

impl EnvKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "matrix" => Some(Self::Matrix),
            "spread" => Some(Self::Spread),
            "linereach" => Some(Self::Linereach),
            _ => None,
        }
    }
}

/// Environment description as stored in run configs.
///
/// Kind-specific fields are optional; [`EnvSpec::default_for`] fills every
/// field a kind needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub n_agents: usize,
    pub episode_length: usize,
    #[serde(default)]
    pub heterogeneous: bool,
    #[serde(default)]
    pub seed: u64,
    /// Matrix: actions per agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<usize>,
    /// Matrix: flattened payoff over joint actions, agent 0 most significant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<usize>,
    /// Spread: how many nearest landmarks each agent observes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearest_k: Option<usize>,
    /// Linereach: one target coordinate per agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<f64>>,
}

impl EnvSpec {
    pub fn default_for(kind: EnvKind) -> Self {
        let base = Self {
            kind,
            n_agents: 2,
            episode_length: 10,
            heterogeneous: false,
            seed: 0,
            actions: None,
            payoff: None,
            width: None,
            height: None,
            landmarks: None,
            nearest_k: None,
            targets: None,
        };
        match kind {
            EnvKind::Matrix => Self {
                actions: Some(3),
                payoff: Some(vec![1.0, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.8]),
                ..base
            },
            EnvKind::Spread => Self {
                n_agents: 3,
                episode_length: 12,
                seed: 3,
                width: Some(5),
                height: Some(5),
                landmarks: Some(3),
                nearest_k: Some(2),
                ..base
            },
            EnvKind::Linereach => Self {
                targets: Some(vec![2.5, -1.5]),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        Env::new(self).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl StepResult {
    /// The shared reward, once per agent.
    pub fn rewards(&self) -> Vec<f64> {
        vec![self.reward; self.obs.len()]
    }
}

#[derive(Clone, Debug)]
pub enum Env {
    Matrix(MatrixGame),
    Spread(Spread),
    LineReach(LineReach),
}

impl Env {
    pub fn new(spec: &EnvSpec) -> Result<Self, EnvError> {
        if spec.episode_length == 0 {
            return Err(EnvError::InvalidSpec("episode_length must be at least 1".into()));
        }
        if spec.n_agents == 0 {
            return Err(EnvError::InvalidSpec("no agents".into()));
        }
        Ok(match spec.kind {
            EnvKind::Matrix => Env::Matrix(MatrixGame::new(spec)?),
            EnvKind::Spread => Env::Spread(Spread::new(spec)?),
            EnvKind::Linereach => Env::LineReach(LineReach::new(spec)?),
        })
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Env::Matrix(e) => e.n_agents(),
            Env::Spread(e) => e.n_agents(),
            Env::LineReach(e) => e.n_agents(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Matrix(e) => e.obs_dim(),
            Env::Spread(e) => e.obs_dim(),
            Env::LineReach(e) => e.obs_dim(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::Matrix(_) => 1,
            Env::Spread(e) => e.state_dim(),
            Env::LineReach(e) => e.state_dim(),
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Env::Matrix(e) => ActionSpace::Discrete(e.n_actions()),
            Env::Spread(_) => ActionSpace::Discrete(spread::N_MOVES),
            Env::LineReach(_) => ActionSpace::Continuous(1),
        }
    }

    pub fn episode_length(&self) -> usize {
        match self {
            Env::Matrix(e) => e.episode_length(),
            Env::Spread(e) => e.episode_length(),
            Env::LineReach(e) => e.episode_length(),
        }
    }

    /// The environments are deterministic given the spec; `rng` is accepted
    /// so stochastic variants can share the signature.
    pub fn reset(&mut self, _rng: &mut ChaCha8Rng) -> StepResult {
        match self {
            Env::Matrix(e) => e.reset(),
            Env::Spread(e) => e.reset(),
            Env::LineReach(e) => e.reset(),
        }
    }

    pub fn step(&mut self, actions: &[Action], _rng: &mut ChaCha8Rng) -> Result<StepResult, EnvError> {
        if actions.len() != self.n_agents() {
            return Err(EnvError::InvalidSpec(format!(
                "{} actions for {} agents",
                actions.len(),
                self.n_agents()
            )));
        }
        match self {
            Env::Matrix(e) => e.step(actions),
            Env::Spread(e) => e.step(actions),
            Env::LineReach(e) => e.step(actions),
        }
    }
}

/// Largest achievable undiscounted episode return.
pub fn optimal_return(spec: &EnvSpec) -> Result<f64, EnvError> {
    match Env::new(spec)? {
        Env::Matrix(e) => Ok(e.optimal_return()),
        Env::Spread(e) => e.optimal_return(),
        Env::LineReach(e) => Ok(e.optimal_return()),
    }
}

/// Fraction of the optimum reached by `achieved`.
///
/// Positive optima use `achieved / optimum`. Non-positive optima are costs and
/// use `optimum / achieved`, so 1.0 means optimal and 0.85 means the cost is
/// `1/0.85` times the optimal cost.
pub fn fraction_of_optimal(achieved: f64, optimum: f64) -> f64 {
    if optimum > 0.0 {
        achieved / optimum
    } else if optimum == 0.0 {
        if achieved >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else if achieved >= 0.0 {
        1.0
    } else {
        optimum / achieved
    }
}

pub(crate) fn discrete(agent: usize, a: &Action, n: usize) -> Result<usize, EnvError> {
    match a {
        Action::Discrete(k) if *k < n => Ok(*k),
        other => Err(EnvError::ActionOutOfRange {
            agent,
            action: format!("{other:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn defaults_are_valid() {
        for k in [EnvKind::Matrix, EnvKind::Spread, EnvKind::Linereach] {
            EnvSpec::default_for(k).validate().unwrap();
        }
    }

    #[test]
    fn episodes_end_exactly_at_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [EnvKind::Matrix, EnvKind::Spread, EnvKind::Linereach] {
            let spec = EnvSpec::default_for(k);
            let mut env = Env::new(&spec).unwrap();
            let mut r = env.reset(&mut rng);
            let a: Vec<Action> = match env.action_space() {
                ActionSpace::Discrete(_) => vec![Action::Discrete(1); env.n_agents()],
                ActionSpace::Continuous(d) => vec![Action::Continuous(vec![0.3; d]); env.n_agents()],
            };
            for t in 1..=spec.episode_length {
                assert!(!r.done);
                r = env.step(&a, &mut rng).unwrap();
                assert_eq!(r.done, t == spec.episode_length);
                let rs = r.rewards();
                assert!(rs.iter().all(|&x| x == rs[0]));
                assert_eq!(r.obs.len(), env.n_agents());
                assert!(r.obs.iter().all(|o| o.len() == env.obs_dim()));
                assert_eq!(r.state.len(), env.state_dim());
            }
            assert!(matches!(env.step(&a, &mut rng), Err(EnvError::Finished)));
        }
    }

    #[test]
    fn fraction_conventions() {
        assert_eq!(fraction_of_optimal(9.5, 10.0), 0.95);
        assert!((fraction_of_optimal(-4.0, -3.4) - 0.85).abs() < 1e-12);
        assert_eq!(fraction_of_optimal(-3.4, -3.4), 1.0);
    }
}
