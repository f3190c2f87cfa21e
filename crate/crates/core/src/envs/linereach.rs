use super::{EnvError, EnvSpec, StepResult};
use crate::policies::Action;

/// Agents on a line, each pulled toward its own target.
///
/// Obs per agent: `[x_i, t_i - x_i, t/T]`. State: all positions then `t/T`.
#[derive(Clone, Debug)]
pub struct LineReach {
    targets: Vec<f64>,
    x: Vec<f64>,
    length: usize,
    t: usize,
}

impl LineReach {
    pub fn new(spec: &EnvSpec) -> Result<Self, EnvError> {
        let targets = spec
            .targets
            .clone()
            .ok_or_else(|| EnvError::InvalidSpec("linereach needs `targets`".into()))?;
        if targets.len() != spec.n_agents {
            return Err(EnvError::InvalidSpec(format!(
                "{} targets for {} agents",
                targets.len(),
                spec.n_agents
            )));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(EnvError::InvalidSpec("non-finite target".into()));
        }
        Ok(Self {
            x: vec![0.0; targets.len()],
            targets,
            length: spec.episode_length,
            t: 0,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.targets.len()
    }

    pub fn obs_dim(&self) -> usize {
        3
    }

    pub fn state_dim(&self) -> usize {
        self.targets.len() + 1
    }

    pub fn episode_length(&self) -> usize {
        self.length
    }

    pub fn positions(&self) -> &[f64] {
        &self.x
    }

    fn observe(&self, reward: f64) -> StepResult {
        let phase = self.t as f64 / self.length as f64;
        let obs = self
            .x
            .iter()
            .zip(&self.targets)
            .map(|(&x, &g)| vec![x, g - x, phase])
            .collect();
        let mut state = self.x.clone();
        state.push(phase);
        StepResult {
            obs,
            state,
            reward,
            done: self.t == self.length,
        }
    }

    pub fn reset(&mut self) -> StepResult {
        self.t = 0;
        self.x.iter_mut().for_each(|x| *x = 0.0);
        self.observe(0.0)
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult, EnvError> {
        if self.t >= self.length {
            return Err(EnvError::Finished);
        }
        for (i, a) in actions.iter().enumerate() {
            match a {
                Action::Continuous(v) if v.len() == 1 && v[0].is_finite() => {
                    self.x[i] += v[0].clamp(-1.0, 1.0);
                }
                other => {
                    return Err(EnvError::ActionOutOfRange {
                        agent: i,
                        action: format!("{other:?}"),
                    })
                }
            }
        }
        self.t += 1;
        let r = -self
            .x
            .iter()
            .zip(&self.targets)
            .map(|(x, g)| (x - g).abs())
            .sum::<f64>();
        Ok(self.observe(r))
    }

    /// Every agent closes one unit per step until it arrives.
    pub fn optimal_return(&self) -> f64 {
        let mut total = 0.0;
        for &g in &self.targets {
            let d = g.abs();
            for t in 1..=self.length {
                total -= (d - t as f64).max(0.0);
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    #[test]
    fn zero_action_keeps_positions() {
        let mut e = LineReach::new(&EnvSpec::default_for(EnvKind::Linereach)).unwrap();
        let r0 = e.reset();
        assert_eq!(r0.obs[0], vec![0.0, 2.5, 0.0]);
        let z = vec![Action::Continuous(vec![0.0]); 2];
        let r = e.step(&z).unwrap();
        assert_eq!(e.positions(), &[0.0, 0.0]);
        assert_eq!(r.reward, -4.0);
    }

    #[test]
    fn closed_form_matches_greedy_rollout() {
        // targets 2.5 and -1.5: distances after each step are (1.5, .5), (.5, 0), (0, 0)...
        let e = LineReach::new(&EnvSpec::default_for(EnvKind::Linereach)).unwrap();
        assert!((e.optimal_return() - (-2.0 - 0.5)).abs() < 1e-12);
        let mut e2 = e.clone();
        e2.reset();
        let mut ret = 0.0;
        loop {
            let acts: Vec<Action> = e2
                .positions()
                .iter()
                .zip([2.5, -1.5])
                .map(|(x, g)| Action::Continuous(vec![g - x]))
                .collect();
            let r = e2.step(&acts).unwrap();
            ret += r.reward;
            if r.done {
                break;
            }
        }
        assert!((ret - e.optimal_return()).abs() < 1e-12);
    }

    #[test]
    fn actions_are_clipped() {
        let mut e = LineReach::new(&EnvSpec::default_for(EnvKind::Linereach)).unwrap();
        e.reset();
        e.step(&[Action::Continuous(vec![7.0]), Action::Continuous(vec![-0.25])]).unwrap();
        assert_eq!(e.positions(), &[1.0, -0.25]);
        assert!(e.step(&[Action::Discrete(0), Action::Continuous(vec![0.0])]).is_err());
    }
}
