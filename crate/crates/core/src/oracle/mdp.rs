use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::OracleError;

const SUM_TOL: f64 = 1e-12;

/// Finite cooperative MDP with a shared reward.
///
/// Joint actions are flattened in mixed radix with agent 0 most significant,
/// so `transition[(s * joint + a) * states + s']` mirrors a nested
/// `[s][a^1]..[a^n][s']` array.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_agents: usize,
    n_states: usize,
    actions: Vec<usize>,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    rho0: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        actions: Vec<usize>,
        n_states: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        rho0: Vec<f64>,
    ) -> Result<Self, OracleError> {
        let n_agents = actions.len();
        if n_agents == 0 || n_states == 0 || actions.contains(&0) {
            return Err(OracleError::Invalid("empty agent, state or action set".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(OracleError::Invalid(format!("gamma {gamma} outside [0, 1)")));
        }
        let joint: usize = actions.iter().product();
        if transition.len() != n_states * joint * n_states
            || reward.len() != n_states * joint
            || rho0.len() != n_states
        {
            return Err(OracleError::Dimension("transition, reward or rho0 size".into()));
        }
        if transition.iter().chain(&rho0).any(|&p| !(p >= 0.0)) || reward.iter().any(|r| !r.is_finite()) {
            return Err(OracleError::Invalid("negative or non-finite entries".into()));
        }
        for (k, row) in transition.chunks(n_states).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(OracleError::Invalid(format!("transition row {k} sums to {s}")));
            }
        }
        let s: f64 = rho0.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(OracleError::Invalid(format!("rho0 sums to {s}")));
        }
        Ok(Self {
            n_agents,
            n_states,
            actions,
            transition,
            reward,
            gamma,
            rho0,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }

    pub fn n_joint(&self) -> usize {
        self.actions.iter().product()
    }

    pub fn reward(&self, s: usize, ja: usize) -> f64 {
        self.reward[s * self.n_joint() + ja]
    }

    pub fn transition_row(&self, s: usize, ja: usize) -> &[f64] {
        let k = s * self.n_joint() + ja;
        &self.transition[k * self.n_states..(k + 1) * self.n_states]
    }

    /// Per-agent actions of a flattened joint action.
    pub fn decode(&self, mut ja: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_agents];
        for i in (0..self.n_agents).rev() {
            out[i] = ja % self.actions[i];
            ja /= self.actions[i];
        }
        out
    }

    pub fn encode(&self, a: &[usize]) -> Result<usize, OracleError> {
        if a.len() != self.n_agents {
            return Err(OracleError::Dimension(format!("{} actions for {} agents", a.len(), self.n_agents)));
        }
        let mut ja = 0;
        for (i, (&ai, &n)) in a.iter().zip(&self.actions).enumerate() {
            if ai >= n {
                return Err(OracleError::Index(format!("agent {i} action {ai} of {n}")));
            }
            ja = ja * n + ai;
        }
        Ok(ja)
    }

    /// The two-agent guard game: matching pays in s0, differing pays in s1,
    /// and a match sends the system to s0.
    pub fn two_guard() -> Self {
        let (n_s, joint) = (2, 4);
        let mut transition = vec![0.0; n_s * joint * n_s];
        let mut reward = vec![0.0; n_s * joint];
        for s in 0..n_s {
            for ja in 0..joint {
                let (a1, a2) = (ja / 2, ja % 2);
                let matched = a1 == a2;
                reward[s * joint + ja] = if (s == 0) == matched { 1.0 } else { 0.0 };
                let next = if matched { 0 } else { 1 };
                transition[(s * joint + ja) * n_s + next] = 1.0;
            }
        }
        Self::new(vec![2, 2], n_s, transition, reward, 0.9, vec![0.5, 0.5]).expect("valid guard game")
    }

    /// Dense random MDP with rewards in [0, 1) and strictly positive rows.
    pub fn random<R: Rng>(rng: &mut R, actions: Vec<usize>, n_states: usize, gamma: f64) -> Self {
        let joint: usize = actions.iter().product();
        let mut transition = Vec::with_capacity(n_states * joint * n_states);
        for _ in 0..n_states * joint {
            let row: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 0.05).collect();
            let z: f64 = row.iter().sum();
            transition.extend(row.iter().map(|p| p / z));
        }
        let reward = (0..n_states * joint).map(|_| rng.random::<f64>()).collect();
        let rho: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 0.05).collect();
        let z: f64 = rho.iter().sum();
        let rho0 = rho.iter().map(|p| p / z).collect();
        Self::new(actions, n_states, transition, reward, gamma, rho0).expect("random mdp is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, OracleError> {
        let file: MdpFile = serde_json::from_str(text).map_err(|e| OracleError::Parse(e.to_string()))?;
        if file.actions.len() != file.n_agents {
            return Err(OracleError::Dimension("actions list length differs from n_agents".into()));
        }
        let n_states = file.rho0.len();
        let mut transition = Vec::new();
        flatten(&file.transition, &mut transition)?;
        let mut reward = Vec::new();
        flatten(&file.reward, &mut reward)?;
        Self::new(file.actions, n_states, transition, reward, file.gamma, file.rho0)
    }

    pub fn to_json(&self) -> Value {
        let joint = self.n_joint();
        let mut trans = Vec::new();
        let mut rew = Vec::new();
        for s in 0..self.n_states {
            let rows: Vec<Vec<f64>> = (0..joint).map(|ja| self.transition_row(s, ja).to_vec()).collect();
            trans.push(nest(&self.actions, &rows.iter().map(|r| serde_json::json!(r)).collect::<Vec<_>>()));
            let rs: Vec<Value> = (0..joint).map(|ja| serde_json::json!(self.reward(s, ja))).collect();
            rew.push(nest(&self.actions, &rs));
        }
        serde_json::json!({
            "n_agents": self.n_agents,
            "actions": self.actions,
            "transition": trans,
            "reward": rew,
            "gamma": self.gamma,
            "rho0": self.rho0,
        })
    }
}

#[derive(Deserialize, Serialize)]
struct MdpFile {
    n_agents: usize,
    actions: Vec<usize>,
    transition: Value,
    reward: Value,
    gamma: f64,
    rho0: Vec<f64>,
}

fn flatten(v: &Value, out: &mut Vec<f64>) -> Result<(), OracleError> {
    match v {
        Value::Array(items) => items.iter().try_for_each(|x| flatten(x, out)),
        Value::Number(n) => {
            out.push(n.as_f64().ok_or_else(|| OracleError::Parse("bad number".into()))?);
            Ok(())
        }
        _ => Err(OracleError::Parse("expected nested numeric arrays".into())),
    }
}

/// Groups a flat joint-action list into nested per-agent arrays.
fn nest(actions: &[usize], flat: &[Value]) -> Value {
    if actions.is_empty() {
        return flat[0].clone();
    }
    let stride = flat.len() / actions[0];
    Value::Array(flat.chunks(stride).map(|c| nest(&actions[1..], c)).collect())
}

/// Product-form joint policy: `probs[i][s][a]` is agent i's π(a|s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularJointPolicy {
    probs: Vec<Vec<Vec<f64>>>,
}

impl TabularJointPolicy {
    pub fn new(probs: Vec<Vec<Vec<f64>>>) -> Result<Self, OracleError> {
        for (i, agent) in probs.iter().enumerate() {
            for (s, row) in agent.iter().enumerate() {
                let z: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p >= 0.0)) || (z - 1.0).abs() > SUM_TOL {
                    return Err(OracleError::Invalid(format!("agent {i} state {s} row is not a distribution")));
                }
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(mdp: &TabularMdp) -> Self {
        let probs = mdp
            .actions()
            .iter()
            .map(|&n| vec![vec![1.0 / n as f64; n]; mdp.n_states()])
            .collect();
        Self { probs }
    }

    /// Softmax of standard-normal logits scaled by `scale`; full support.
    pub fn random<R: Rng>(rng: &mut R, mdp: &TabularMdp, scale: f64) -> Self {
        let probs = mdp
            .actions()
            .iter()
            .map(|&n| {
                (0..mdp.n_states())
                    .map(|_| {
                        let l: Vec<f64> = (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
                        softmax(&l)
                    })
                    .collect()
            })
            .collect();
        Self { probs }
    }

    pub fn n_agents(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, agent: usize, s: usize, a: usize) -> f64 {
        self.probs[agent][s][a]
    }

    pub fn row(&self, agent: usize, s: usize) -> &[f64] {
        &self.probs[agent][s]
    }

    pub fn agent_table(&self, agent: usize) -> &[Vec<f64>] {
        &self.probs[agent]
    }

    /// Replaces one agent's table, keeping the others.
    pub fn with_agent(&self, agent: usize, table: Vec<Vec<f64>>) -> Self {
        let mut probs = self.probs.clone();
        probs[agent] = table;
        Self { probs }
    }

    /// Probability of a decoded joint action, restricted to `agents`.
    pub fn prob_over(&self, s: usize, a: &[usize], agents: AgentSet) -> f64 {
        agents.iter(a.len()).map(|i| self.probs[i][s][a[i]]).product()
    }

    pub fn check_compatible(&self, mdp: &TabularMdp) -> Result<(), OracleError> {
        if self.probs.len() != mdp.n_agents() {
            return Err(OracleError::Dimension("policy agent count".into()));
        }
        for (i, t) in self.probs.iter().enumerate() {
            if t.len() != mdp.n_states() || t.iter().any(|r| r.len() != mdp.actions()[i]) {
                return Err(OracleError::Dimension(format!("policy table of agent {i}")));
            }
        }
        Ok(())
    }
}

pub fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Bitmask over agent indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct AgentSet(pub u32);

impl AgentSet {
    pub const EMPTY: AgentSet = AgentSet(0);

    pub fn all(n: usize) -> Self {
        AgentSet(((1u64 << n) - 1) as u32)
    }

    pub fn single(i: usize) -> Self {
        AgentSet(1 << i)
    }

    pub fn of(agents: &[usize]) -> Self {
        AgentSet(agents.iter().fold(0, |m, &i| m | (1 << i)))
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn union(self, o: AgentSet) -> Self {
        AgentSet(self.0 | o.0)
    }

    pub fn minus(self, o: AgentSet) -> Self {
        AgentSet(self.0 & !o.0)
    }

    pub fn complement(self, n: usize) -> Self {
        AgentSet::all(n).minus(self)
    }

    pub fn disjoint(self, o: AgentSet) -> bool {
        self.0 & o.0 == 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(self, n: usize) -> impl Iterator<Item = usize> {
        (0..n).filter(move |&i| self.contains(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = TabularMdp::random(&mut rng, vec![2, 3, 2], 2, 0.9);
        for ja in 0..m.n_joint() {
            assert_eq!(m.encode(&m.decode(ja)).unwrap(), ja);
        }
        assert_eq!(m.decode(1), vec![0, 0, 1]);
        assert!(m.encode(&[0, 3, 0]).is_err());
    }

    #[test]
    fn guard_game_tables() {
        let g = TabularMdp::two_guard();
        assert_eq!(g.reward(0, g.encode(&[1, 1]).unwrap()), 1.0);
        assert_eq!(g.reward(0, g.encode(&[0, 1]).unwrap()), 0.0);
        assert_eq!(g.reward(1, g.encode(&[0, 1]).unwrap()), 1.0);
        assert_eq!(g.transition_row(1, g.encode(&[0, 0]).unwrap()), &[1.0, 0.0]);
        assert_eq!(g.transition_row(0, g.encode(&[1, 0]).unwrap()), &[0.0, 1.0]);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(TabularMdp::new(vec![1], 1, vec![0.5], vec![0.0], 0.9, vec![1.0]).is_err());
        assert!(TabularMdp::new(vec![1], 1, vec![1.0], vec![0.0], 1.0, vec![1.0]).is_err());
        assert!(TabularMdp::new(vec![1], 1, vec![1.0], vec![0.0], 0.5, vec![0.9]).is_err());
        assert!(TabularJointPolicy::new(vec![vec![vec![0.7, 0.2]]]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TabularMdp::random(&mut rng, vec![2, 3], 3, 0.8);
        let back = TabularMdp::from_json(&m.to_json().to_string()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn agent_sets() {
        let s = AgentSet::of(&[0, 2]);
        assert_eq!(s.iter(4).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(s.complement(4).iter(4).collect::<Vec<_>>(), vec![1, 3]);
        assert!(s.disjoint(AgentSet::single(1)));
    }
}
