//! Per-agent stochastic policies over the parameter store, and the critic.
//!
//! Every log-probability computed off the tape goes through the same float
//! operations, in the same order, as its on-tape counterpart, so a snapshot
//! at unchanged parameters reproduces the stored values bit for bit.

mod critic;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use critic::{CriticInput, CriticNet};

use crate::envs::ActionSpace;
use crate::nn::{bind_sharing, forward, infer, Graph, HeadKind, HeadOut, MlpSpec, NnError, ParamStore, SharingMode, Tensor, Var};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("action outside the support: {0}")]
    Support(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// One network per agent, with layers bound according to the sharing mode.
///
/// Under full sharing the observation gets the agent one-hot appended so the
/// common network can still tell agents apart.
#[derive(Clone, Debug)]
pub struct PolicyEnsemble {
    pub store: ParamStore,
    spec: MlpSpec,
    n_agents: usize,
    mode: SharingMode,
    obs_dim: usize,
}

impl PolicyEnsemble {
    pub fn new(
        obs_dim: usize,
        space: ActionSpace,
        hidden: Vec<usize>,
        n_agents: usize,
        mode: SharingMode,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        let head = match space {
            ActionSpace::Discrete(actions) => HeadKind::Categorical { actions },
            ActionSpace::Continuous(dim) => HeadKind::Gaussian { dim },
        };
        let id_dim = if mode == SharingMode::Full { n_agents } else { 0 };
        let spec = MlpSpec::new(obs_dim + id_dim, hidden, head);
        let store = bind_sharing(&spec, n_agents, mode, seed)?;
        Ok(Self {
            store,
            spec,
            n_agents,
            mode,
            obs_dim,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn mode(&self) -> SharingMode {
        self.mode
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Network input rows for `agent`.
    pub fn agent_input<R: AsRef<[f64]>>(&self, agent: usize, rows: &[R]) -> Result<Tensor, PolicyError> {
        if agent >= self.n_agents {
            return Err(PolicyError::Dimension(format!("agent {agent} of {}", self.n_agents)));
        }
        let w = self.spec.input_dim;
        let mut data = Vec::with_capacity(rows.len() * w);
        for r in rows {
            let r = r.as_ref();
            if r.len() != self.obs_dim {
                return Err(PolicyError::Dimension(format!(
                    "observation of {} values, expected {}",
                    r.len(),
                    self.obs_dim
                )));
            }
            data.extend_from_slice(r);
            if self.mode == SharingMode::Full {
                data.extend((0..self.n_agents).map(|k| if k == agent { 1.0 } else { 0.0 }));
            }
        }
        Ok(Tensor::new(vec![rows.len(), w], data)?)
    }

    pub fn head(&self, agent: usize, input: &Tensor) -> Result<HeadOut<Tensor>, PolicyError> {
        let out = infer(&self.store, &self.spec, agent, input)?;
        let finite = match &out {
            HeadOut::Logits(t) | HeadOut::Value(t) => t.is_finite(),
            HeadOut::Gaussian { mean, log_std } => mean.is_finite() && log_std.is_finite(),
        };
        if !finite {
            return Err(PolicyError::NonFinite(format!("policy output for agent {agent}")));
        }
        Ok(out)
    }

    /// Samples one action and returns it with its log-probability.
    pub fn act(&self, agent: usize, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<(Action, f64), PolicyError> {
        let input = self.agent_input(agent, &[obs])?;
        let action = match self.head(agent, &input)? {
            HeadOut::Logits(logits) => {
                let lsm = logits.log_softmax();
                let u: f64 = rng.random();
                let mut cum = 0.0;
                let mut pick = lsm.len() - 1;
                for (k, l) in lsm.data().iter().enumerate() {
                    cum += l.exp();
                    if u < cum {
                        pick = k;
                        break;
                    }
                }
                Action::Discrete(pick)
            }
            HeadOut::Gaussian { mean, log_std } => Action::Continuous(
                mean.data()
                    .iter()
                    .zip(log_std.data())
                    .map(|(m, ls)| m + ls.exp() * Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect(),
            ),
            HeadOut::Value(_) => unreachable!("policy heads are never value heads"),
        };
        let (lp, _) = self.log_probs(agent, &input, std::slice::from_ref(&action))?;
        Ok((action, lp[0]))
    }

    /// Mode of the distribution.
    pub fn act_greedy(&self, agent: usize, obs: &[f64]) -> Result<Action, PolicyError> {
        let input = self.agent_input(agent, &[obs])?;
        Ok(match self.head(agent, &input)? {
            HeadOut::Logits(l) => {
                let mut best = 0;
                for (k, v) in l.data().iter().enumerate() {
                    if *v > l.data()[best] {
                        best = k;
                    }
                }
                Action::Discrete(best)
            }
            HeadOut::Gaussian { mean, .. } => Action::Continuous(mean.into_data()),
            HeadOut::Value(_) => unreachable!("policy heads are never value heads"),
        })
    }

    /// Tape-free log-probabilities and entropies.
    pub fn log_probs(&self, agent: usize, input: &Tensor, actions: &[Action]) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        if actions.len() != input.rows() {
            return Err(PolicyError::Dimension(format!("{} actions for {} rows", actions.len(), input.rows())));
        }
        match self.head(agent, input)? {
            HeadOut::Logits(logits) => {
                let idx = discrete_indices(actions, logits.cols())?;
                let lsm = logits.log_softmax();
                let n = lsm.cols();
                let mut lp = Vec::with_capacity(idx.len());
                let mut ent = Vec::with_capacity(idx.len());
                for (r, row) in lsm.data().chunks(n).enumerate() {
                    lp.push(row[idx[r]]);
                    let s: f64 = row.iter().map(|l| l.exp() * l).sum();
                    ent.push(s * -1.0);
                }
                Ok((lp, ent))
            }
            HeadOut::Gaussian { mean, log_std } => {
                let a = continuous_matrix(actions, mean.cols())?;
                let d = mean.cols();
                let ls = log_std.data();
                let mut lp = Vec::with_capacity(actions.len());
                let mut ent = Vec::with_capacity(actions.len());
                for (r, mu) in mean.data().chunks(d).enumerate() {
                    let terms: Vec<f64> = (0..d)
                        .map(|k| {
                            let z = (a.row(r)[k] - mu[k]) * (ls[k] * -1.0).exp();
                            (z * z) * -0.5 - ls[k] + -HALF_LN_2PI
                        })
                        .collect();
                    lp.push(terms.iter().sum());
                    let e: Vec<f64> = ls.iter().map(|l| l + (0.5 + HALF_LN_2PI)).collect();
                    ent.push(e.iter().sum());
                }
                Ok((lp, ent))
            }
            HeadOut::Value(_) => unreachable!("policy heads are never value heads"),
        }
    }

    /// Log-probabilities `[B, 1]` and entropies `[B, 1]` on the tape.
    pub fn evaluate_actions(&self, g: &mut Graph, agent: usize, input: &Tensor, actions: &[Action]) -> Result<(Var, Var), PolicyError> {
        if actions.len() != input.rows() {
            return Err(PolicyError::Dimension(format!("{} actions for {} rows", actions.len(), input.rows())));
        }
        let x = g.input(input.clone());
        match forward(g, &self.store, &self.spec, agent, x)? {
            HeadOut::Logits(logits) => {
                let idx = discrete_indices(actions, g.value(logits).cols())?;
                let lsm = g.log_softmax(logits);
                let lp = g.gather(lsm, idx)?;
                let p = g.exp(lsm);
                let pl = g.mul(p, lsm)?;
                let s = g.sum_cols(pl);
                let ent = g.scale(s, -1.0);
                Ok((lp, ent))
            }
            HeadOut::Gaussian { mean, log_std } => {
                let rows = input.rows();
                let a = continuous_matrix(actions, g.value(mean).cols())?;
                let a = g.input(a);
                let ls = g.broadcast_rows(log_std, rows);
                let neg = g.scale(ls, -1.0);
                let inv = g.exp(neg);
                let diff = g.sub(a, mean)?;
                let z = g.mul(diff, inv)?;
                let z2 = g.square(z);
                let t1 = g.scale(z2, -0.5);
                let t2 = g.sub(t1, ls)?;
                let t3 = g.add_scalar(t2, -HALF_LN_2PI);
                let lp = g.sum_cols(t3);
                let e = g.add_scalar(ls, 0.5 + HALF_LN_2PI);
                let ent = g.sum_cols(e);
                Ok((lp, ent))
            }
            HeadOut::Value(_) => unreachable!("policy heads are never value heads"),
        }
    }
}

fn discrete_indices(actions: &[Action], n: usize) -> Result<Vec<usize>, PolicyError> {
    actions
        .iter()
        .map(|a| match a {
            Action::Discrete(k) if *k < n => Ok(*k),
            other => Err(PolicyError::Support(format!("{other:?} for {n} actions"))),
        })
        .collect()
}

fn continuous_matrix(actions: &[Action], d: usize) -> Result<Tensor, PolicyError> {
    let mut data = Vec::with_capacity(actions.len() * d);
    for a in actions {
        match a {
            Action::Continuous(v) if v.len() == d && v.iter().all(|x| x.is_finite()) => data.extend_from_slice(v),
            other => return Err(PolicyError::Support(format!("{other:?} for a {d}-dim Gaussian"))),
        }
    }
    Ok(Tensor::new(vec![actions.len(), d], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotVersion {
    Old,
    Half,
}

/// Frozen log-probabilities of the taken actions, indexed `[agent][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbSnapshot {
    pub version: SnapshotVersion,
    logp: Vec<Vec<f64>>,
}

impl ProbSnapshot {
    pub fn new(version: SnapshotVersion, logp: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        if logp.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite("snapshot log-probability".into()));
        }
        Ok(Self { version, logp })
    }

    pub fn logp(&self, agent: usize) -> &[f64] {
        &self.logp[agent]
    }

    pub fn n_agents(&self) -> usize {
        self.logp.len()
    }
}

/// One forward pass per agent over the whole batch.
///
/// `inputs[i]` are agent `i`'s network inputs and `actions[i]` its actions.
pub fn snapshot_probs(
    ens: &PolicyEnsemble,
    inputs: &[Tensor],
    actions: &[Vec<Action>],
    version: SnapshotVersion,
) -> Result<ProbSnapshot, PolicyError> {
    if inputs.len() != ens.n_agents() || actions.len() != ens.n_agents() {
        return Err(PolicyError::Dimension("one input block per agent".into()));
    }
    let logp = (0..ens.n_agents())
        .map(|i| ens.log_probs(i, &inputs[i], &actions[i]).map(|(lp, _)| lp))
        .collect::<Result<Vec<_>, _>>()?;
    ProbSnapshot::new(version, logp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlStats {
    pub mean: f64,
    pub max: f64,
}

/// `KL(old || new)` of each state's action distribution, per state.
pub fn kl_rows(old: &HeadOut<Tensor>, new: &HeadOut<Tensor>) -> Result<Vec<f64>, PolicyError> {
    match (old, new) {
        (HeadOut::Logits(a), HeadOut::Logits(b)) => {
            let (la, lb) = (a.log_softmax(), b.log_softmax());
            let n = la.cols();
            Ok(la
                .data()
                .chunks(n)
                .zip(lb.data().chunks(n))
                .map(|(p, q)| {
                    p.iter()
                        .zip(q)
                        .map(|(lp, lq)| {
                            let w = lp.exp();
                            if w == 0.0 {
                                0.0
                            } else {
                                w * (lp - lq)
                            }
                        })
                        .sum::<f64>()
                        .max(0.0)
                })
                .collect())
        }
        (HeadOut::Gaussian { mean: m0, log_std: s0 }, HeadOut::Gaussian { mean: m1, log_std: s1 }) => {
            let d = m0.cols();
            Ok(m0
                .data()
                .chunks(d)
                .zip(m1.data().chunks(d))
                .map(|(a, b)| {
                    (0..d)
                        .map(|k| gaussian_kl(a[k], s0.data()[k], b[k], s1.data()[k]))
                        .sum::<f64>()
                        .max(0.0)
                })
                .collect())
        }
        _ => Err(PolicyError::Dimension("head kinds differ".into())),
    }
}

/// `KL(N(m0, e^{2 ls0}) || N(m1, e^{2 ls1}))`.
pub fn gaussian_kl(m0: f64, ls0: f64, m1: f64, ls1: f64) -> f64 {
    let v0 = (2.0 * ls0).exp();
    let v1 = (2.0 * ls1).exp();
    (ls1 - ls0) + (v0 + (m0 - m1).powi(2)) / (2.0 * v1) - 0.5
}

/// Batch mean and max of the per-state KL for every agent.
pub fn kl_per_agent(old: &PolicyEnsemble, new: &PolicyEnsemble, inputs: &[Tensor]) -> Result<Vec<KlStats>, PolicyError> {
    if old.spec() != new.spec() || old.n_agents() != new.n_agents() {
        return Err(PolicyError::Dimension("ensembles differ in architecture".into()));
    }
    (0..old.n_agents())
        .map(|i| {
            let rows = kl_rows(&old.head(i, &inputs[i])?, &new.head(i, &inputs[i])?)?;
            let n = rows.len().max(1) as f64;
            Ok(KlStats {
                mean: rows.iter().sum::<f64>() / n,
                max: rows.iter().copied().fold(0.0, f64::max),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn ens(space: ActionSpace, mode: SharingMode) -> PolicyEnsemble {
        PolicyEnsemble::new(3, space, vec![8, 8], 2, mode, 11).unwrap()
    }

    fn set_logits_bias(e: &mut PolicyEnsemble, bias: &[f64]) {
        let head = e.spec().layers() - 1;
        let id = e.store.binding(0, head).unwrap();
        e.store.tensor_mut(id, 0).unwrap().data_mut().iter_mut().for_each(|w| *w = 0.0);
        e.store.tensor_mut(id, 1).unwrap().data_mut().copy_from_slice(bias);
    }

    #[test]
    fn uniform_logits() {
        let mut e = ens(ActionSpace::Discrete(4), SharingMode::None);
        set_logits_bias(&mut e, &[0.0; 4]);
        let x = e.agent_input(0, &[[0.1, 0.2, 0.3]]).unwrap();
        let (lp, ent) = e.log_probs(0, &x, &[Action::Discrete(2)]).unwrap();
        assert!((lp[0] - 0.25f64.ln()).abs() < 1e-15);
        assert!((ent[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_softmax() {
        let mut e = ens(ActionSpace::Discrete(2), SharingMode::None);
        set_logits_bias(&mut e, &[1f64.ln(), 3f64.ln()]);
        let x = e.agent_input(0, &[[0.0; 3]]).unwrap();
        let (lp, _) = e.log_probs(0, &x, &[Action::Discrete(1)]).unwrap();
        assert!((lp[0].exp() - 0.75).abs() < 1e-15);
        // sampling frequency under inverse-CDF
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ones = (0..4000)
            .filter(|_| e.act(0, &[0.0; 3], &mut rng).unwrap().0 == Action::Discrete(1))
            .count();
        assert!((ones as f64 / 4000.0 - 0.75).abs() < 0.03);
    }

    #[test]
    fn gaussian_entropy_closed_form() {
        let e = PolicyEnsemble::new(3, ActionSpace::Continuous(1), vec![4], 1, SharingMode::None, 0).unwrap();
        let x = e.agent_input(0, &[[0.0; 3]]).unwrap();
        let (_, ent) = e.log_probs(0, &x, &[Action::Continuous(vec![0.3])]).unwrap();
        let want = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 0.25).ln();
        assert!((ent[0] - want).abs() < 1e-12);
    }

    #[test]
    fn act_matches_tape_bitwise_and_is_seeded() {
        for space in [ActionSpace::Discrete(5), ActionSpace::Continuous(2)] {
            for mode in [SharingMode::Full, SharingMode::Partial, SharingMode::None] {
                let e = ens(space, mode);
                let mut r1 = ChaCha8Rng::seed_from_u64(9);
                let mut r2 = ChaCha8Rng::seed_from_u64(9);
                let obs = [[0.3, -1.0, 0.7], [0.0, 0.5, -0.2], [1.0, 1.0, 1.0]];
                for agent in 0..2 {
                    let mut acts = vec![];
                    let mut lps = vec![];
                    for o in &obs {
                        let (a, lp) = e.act(agent, o, &mut r1).unwrap();
                        assert_eq!(e.act(agent, o, &mut r2).unwrap(), (a.clone(), lp));
                        acts.push(a);
                        lps.push(lp);
                    }
                    let x = e.agent_input(agent, &obs).unwrap();
                    let mut g = Graph::new();
                    let (lp, ent) = e.evaluate_actions(&mut g, agent, &x, &acts).unwrap();
                    let (lp2, ent2) = e.log_probs(agent, &x, &acts).unwrap();
                    for k in 0..3 {
                        assert_eq!(g.value(lp).data()[k].to_bits(), lps[k].to_bits());
                        assert_eq!(lp2[k].to_bits(), lps[k].to_bits());
                        assert_eq!(g.value(ent).data()[k].to_bits(), ent2[k].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_support_is_rejected() {
        let e = ens(ActionSpace::Discrete(3), SharingMode::None);
        let x = e.agent_input(0, &[[0.0; 3]]).unwrap();
        assert!(matches!(e.log_probs(0, &x, &[Action::Discrete(3)]), Err(PolicyError::Support(_))));
        assert!(e.agent_input(0, &[[0.0; 2]]).is_err());
    }

    fn fd_check(space: ActionSpace) {
        let e = ens(space, SharingMode::Partial);
        let obs = [[0.3, -1.0, 0.7], [0.2, 0.5, -0.2]];
        let acts = match space {
            ActionSpace::Discrete(_) => vec![Action::Discrete(1), Action::Discrete(2)],
            ActionSpace::Continuous(_) => vec![Action::Continuous(vec![0.4, -0.1]), Action::Continuous(vec![-0.3, 0.2])],
        };
        let x = e.agent_input(1, &obs).unwrap();
        let mut g = Graph::new();
        let (lp, ent) = e.evaluate_actions(&mut g, 1, &x, &acts).unwrap();
        let s = g.add(lp, ent).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        let objective = |e: &PolicyEnsemble| {
            let (a, b) = e.log_probs(1, &x, &acts).unwrap();
            a.iter().chain(&b).sum::<f64>()
        };
        for (slot, ts) in grads.slots() {
            for (ti, t) in ts.iter().enumerate() {
                for k in 0..t.len() {
                    let h = 1e-6;
                    let mut p = e.clone();
                    p.store.tensor_mut(slot, ti).unwrap().data_mut()[k] += h;
                    let mut m = e.clone();
                    m.store.tensor_mut(slot, ti).unwrap().data_mut()[k] -= h;
                    let fd = (objective(&p) - objective(&m)) / (2.0 * h);
                    let an = t.data()[k];
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn logprob_entropy_gradients_match_fd() {
        fd_check(ActionSpace::Discrete(3));
        fd_check(ActionSpace::Continuous(2));
    }

    #[test]
    fn kl_examples() {
        let a = HeadOut::Logits(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let b = HeadOut::Logits(Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap());
        let k = kl_rows(&a, &b).unwrap()[0];
        let want = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((k - want).abs() < 1e-15);
        assert!((want - 0.1438).abs() < 1e-4);
        let g = gaussian_kl(0.0, 0.5f64.ln(), 0.0, 0.0);
        assert!((g - (2f64.ln() + 0.25 / 2.0 - 0.5)).abs() < 1e-15);
        let e = ens(ActionSpace::Discrete(3), SharingMode::Full);
        let x: Vec<Tensor> = (0..2).map(|i| e.agent_input(i, &[[0.1, 0.2, 0.3]]).unwrap()).collect();
        let ks = kl_per_agent(&e, &e.clone(), &x).unwrap();
        assert!(ks.iter().all(|k| k.mean == 0.0 && k.max == 0.0));
    }

    #[test]
    fn snapshot_rejects_non_finite() {
        assert!(ProbSnapshot::new(SnapshotVersion::Old, vec![vec![f64::NAN]]).is_err());
    }

    proptest! {
        #[test]
        fn full_sharing_same_input_same_distribution(o in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let e = PolicyEnsemble::new(3, ActionSpace::Discrete(4), vec![6], 3, SharingMode::Full, 5).unwrap();
            let x1 = e.agent_input(1, &[&o]).unwrap();
            let x2 = e.agent_input(1, &[&o]).unwrap();
            prop_assert_eq!(e.head(1, &x1).unwrap(), e.head(2, &x2).unwrap());
            let y = e.agent_input(2, &[&o]).unwrap();
            prop_assert!(x1 != y);
        }
    }
}
