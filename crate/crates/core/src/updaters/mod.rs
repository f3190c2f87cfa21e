//! Update schemes.
//!
//! Every scheme measures its ratios against the parameters that collected
//! the buffer, for the whole iteration.

mod condition;
mod config;
pub mod objective;
mod report;
pub mod selection;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub use condition::{condition_estimate, condition_estimate_average, mu_estimates, ConditionEstimate};
pub use config::{Algo, UpdateConfig};
pub use objective::{coppo_surrogate, fp3o_objective, fp3o_surrogate, live_ratio, ppo_clip_surrogate, stacked_loss};
pub use report::{IterationReport, Phase, TraceEntry, TurnKl};
pub use selection::{nonoverlapping_selection, nonoverlapping_selection_from, PipelineAssignment};

use crate::nn::{clip_grad_norm, Adam, Graph, NnError, ParamStore, Tensor, Var};
use crate::policies::{kl_per_agent, Action, CriticNet, PolicyEnsemble, PolicyError};
use crate::rollout::{minibatches, RolloutBuffer, RolloutError};

#[derive(Debug, thiserror::Error)]
pub enum UpdateError {
    #[error("selection: {0}")]
    Selection(String),
    #[error("config: {0}")]
    Config(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite {0}; parameters restored")]
    NonFinite(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

/// One mini-batch cut out of the buffer for every agent.
struct Batch {
    idx: Vec<usize>,
    inputs: Vec<Tensor>,
    actions: Vec<Vec<Action>>,
    old: Vec<Vec<f64>>,
}

impl Batch {
    fn new(buf: &RolloutBuffer, inputs: &[Tensor], idx: Vec<usize>) -> Self {
        let n = buf.n_agents;
        Self {
            inputs: (0..n).map(|i| inputs[i].select_rows(&idx)).collect(),
            actions: (0..n).map(|i| idx.iter().map(|&t| buf.actions[i][t].clone()).collect()).collect(),
            old: (0..n).map(|i| idx.iter().map(|&t| buf.old_logp[i][t]).collect()).collect(),
            idx,
        }
    }

    fn pick(&self, xs: &[f64]) -> Vec<f64> {
        self.idx.iter().map(|&t| xs[t]).collect()
    }
}

#[derive(Default)]
struct LossTally {
    policy: f64,
    entropy: f64,
    steps: usize,
}

impl LossTally {
    fn add(&mut self, pl: f64, ent: f64) {
        self.policy += pl;
        self.entropy += ent;
        self.steps += 1;
    }

    fn mean(&self) -> (f64, f64) {
        let n = self.steps.max(1) as f64;
        (self.policy / n, self.entropy / n)
    }
}

/// Runs one policy iteration of the configured scheme plus critic training.
#[derive(Clone, Debug)]
pub struct Updater {
    cfg: UpdateConfig,
    assignment: Option<PipelineAssignment>,
}

impl Updater {
    pub fn new(cfg: UpdateConfig, n_agents: usize) -> Result<Self, UpdateError> {
        cfg.validate()?;
        let assignment = if cfg.algo.uses_split() && n_agents >= 2 {
            Some(nonoverlapping_selection(n_agents, cfg.shift)?)
        } else if cfg.algo == Algo::Fp3o {
            return Err(UpdateError::Selection("full-pipeline updates need at least two agents".into()));
        } else {
            None
        };
        Ok(Self { cfg, assignment })
    }

    pub fn config(&self) -> &UpdateConfig {
        &self.cfg
    }

    pub fn assignment(&self) -> Option<&PipelineAssignment> {
        self.assignment.as_ref()
    }

    fn adam(&self, lr: f64) -> Adam {
        Adam {
            eps: self.cfg.adam_eps,
            ..Adam::new(lr)
        }
    }

    fn apply(&self, store: &mut ParamStore, g: &Graph, loss: Var, lr: f64) -> Result<(), UpdateError> {
        let mut grads = g.backward(loss)?;
        clip_grad_norm(&mut grads, self.cfg.max_grad_norm);
        if !grads.is_finite() {
            return Err(UpdateError::NonFinite("gradient".into()));
        }
        self.adam(lr).step(store, &grads)?;
        Ok(())
    }

    fn epochs(&self, buf: &RolloutBuffer, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Batch>>, UpdateError> {
        (0..self.cfg.ppo_epochs)
            .map(|_| {
                Ok(minibatches(buf.len(), self.cfg.num_mini_batch, rng)?
                    .into_iter()
                    .map(|idx| Batch::new(buf, inputs, idx))
                    .collect())
            })
            .collect()
    }

    /// Updates `ens` and `critic` in place. On error both are restored to
    /// their state on entry.
    pub fn iterate(
        &self,
        ens: &mut PolicyEnsemble,
        critic: &mut CriticNet,
        buf: &RolloutBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<IterationReport, UpdateError> {
        if buf.adv_norm.is_empty() || (self.cfg.algo.uses_split() && buf.adv_split.len() != buf.n_agents) {
            return Err(UpdateError::Shape("buffer advantages are not processed".into()));
        }
        let old = ens.clone();
        let old_critic = critic.store.clone();
        let out = self.iterate_inner(&old, ens, critic, buf, rng);
        if out.is_err() {
            ens.store = old.store;
            critic.store = old_critic;
        }
        out
    }

    fn iterate_inner(
        &self,
        old: &PolicyEnsemble,
        ens: &mut PolicyEnsemble,
        critic: &mut CriticNet,
        buf: &RolloutBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<IterationReport, UpdateError> {
        let inputs = buf.agent_inputs(ens)?;
        let mut report = IterationReport::new(self.cfg.algo);
        let mut tally = LossTally::default();
        match self.cfg.algo {
            Algo::Fp3o | Algo::Fp3oInstepOnly => self.fp3o(ens, buf, &inputs, rng, &mut report, &mut tally)?,
            Algo::Happo => self.happo(old, ens, buf, &inputs, rng, &mut report, &mut tally)?,
            Algo::Mappo | Algo::Ippo => self.simultaneous(ens, buf, &inputs, rng, &mut report, &mut tally)?,
            Algo::Coppo => self.coppo(ens, buf, &inputs, rng, &mut report, &mut tally)?,
        }
        (report.policy_loss, report.entropy) = tally.mean();
        report.value_loss = self.train_critic(critic, buf, rng)?;
        report.kl = kl_per_agent(old, ens, &inputs)?;
        Ok(report)
    }

    fn all_logp(ens: &PolicyEnsemble, buf: &RolloutBuffer, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>, UpdateError> {
        (0..buf.n_agents)
            .map(|i| Ok(ens.log_probs(i, &inputs[i], &buf.actions[i])?.0))
            .collect()
    }

    fn fp3o(
        &self,
        ens: &mut PolicyEnsemble,
        buf: &RolloutBuffer,
        inputs: &[Tensor],
        rng: &mut ChaCha8Rng,
        report: &mut IterationReport,
        tally: &mut LossTally,
    ) -> Result<(), UpdateError> {
        let asg = self.assignment.as_ref().expect("fp3o always has an assignment");
        let n = buf.n_agents;
        let eps = self.cfg.clip;
        let double = self.cfg.double_clip.then(|| self.cfg.inner_clip());

        // independent step
        for epoch in self.epochs(buf, inputs, rng)? {
            for mb in epoch {
                let ones = vec![1.0; mb.idx.len()];
                let mut g = Graph::new();
                let mut terms = Vec::with_capacity(n);
                for &i in &asg.i_order {
                    let (r, ent) = live_ratio(&mut g, ens, i, &mb.inputs[i], &mb.actions[i], &mb.old[i])?;
                    let s = fp3o_surrogate(&mut g, r, &ones, &ones, &mb.pick(&buf.adv_split[i]), eps, double)?;
                    terms.push((s, ent));
                }
                let (loss, pl, ent) = stacked_loss(&mut g, &terms, self.cfg.entropy_coef)?;
                self.apply(&mut ens.store, &g, loss, self.cfg.actor_lr)?;
                tally.add(pl, ent);
            }
        }
        report.trace.extend(asg.i_order.iter().enumerate().map(|(p, &i)| TraceEntry {
            phase: Phase::Independent,
            pipeline: Some(p),
            agent: i,
        }));
        if self.cfg.algo == Algo::Fp3oInstepOnly {
            return Ok(());
        }

        let half = Self::all_logp(ens, buf, inputs)?;
        let cond = condition_estimate(&buf.old_logp, &half, &buf.adv_split);
        report.condition = Some(cond);
        if !cond.met {
            report.constraint = Some(cond);
            return Ok(());
        }

        // dependent step with frozen intermediate ratios
        let ratio_half: Vec<Vec<f64>> = (0..n)
            .map(|l| (0..buf.len()).map(|t| (half[l][t] - buf.old_logp[l][t]).exp()).collect())
            .collect();
        let frozen: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .map(|p| {
                let (ip, jp) = (asg.i_order[p], asg.j_order[p]);
                let rest = (0..buf.len())
                    .map(|t| {
                        (0..n)
                            .filter(|&l| l != ip && l != jp)
                            .map(|l| ratio_half[l][t])
                            .product::<f64>()
                    })
                    .collect();
                (rest, ratio_half[ip].clone())
            })
            .collect();
        for epoch in self.epochs(buf, inputs, rng)? {
            for mb in epoch {
                let mut g = Graph::new();
                let mut terms = Vec::with_capacity(n);
                for (p, &jp) in asg.j_order.iter().enumerate() {
                    let (r, ent) = live_ratio(&mut g, ens, jp, &mb.inputs[jp], &mb.actions[jp], &mb.old[jp])?;
                    let s = fp3o_surrogate(
                        &mut g,
                        r,
                        &mb.pick(&frozen[p].0),
                        &mb.pick(&frozen[p].1),
                        &mb.pick(&buf.adv_split[jp]),
                        eps,
                        double,
                    )?;
                    terms.push((s, ent));
                }
                let (loss, pl, ent) = stacked_loss(&mut g, &terms, self.cfg.entropy_coef)?;
                self.apply(&mut ens.store, &g, loss, self.cfg.actor_lr)?;
                tally.add(pl, ent);
            }
        }
        report.dependent_step_ran = true;
        report.trace.extend(asg.j_order.iter().enumerate().map(|(p, &j)| TraceEntry {
            phase: Phase::Dependent,
            pipeline: Some(p),
            agent: j,
        }));
        let fin = Self::all_logp(ens, buf, inputs)?;
        report.constraint = Some(condition_estimate(&buf.old_logp, &fin, &buf.adv_split));
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn happo(
        &self,
        old: &PolicyEnsemble,
        ens: &mut PolicyEnsemble,
        buf: &RolloutBuffer,
        inputs: &[Tensor],
        rng: &mut ChaCha8Rng,
        report: &mut IterationReport,
        tally: &mut LossTally,
    ) -> Result<(), UpdateError> {
        let mut order: Vec<usize> = (0..buf.n_agents).collect();
        order.shuffle(rng);
        let mut factor = vec![1.0; buf.len()];
        for &m in &order {
            let adv: Vec<f64> = buf.joint_adv(m).iter().zip(&factor).map(|(a, f)| a * f).collect();
            for epoch in self.epochs(buf, inputs, rng)? {
                for mb in epoch {
                    let mut g = Graph::new();
                    let (r, ent) = live_ratio(&mut g, ens, m, &mb.inputs[m], &mb.actions[m], &mb.old[m])?;
                    let s = ppo_clip_surrogate(&mut g, r, &mb.pick(&adv), self.cfg.clip)?;
                    let (loss, pl, ent) = stacked_loss(&mut g, &[(s, ent)], self.cfg.entropy_coef)?;
                    self.apply(&mut ens.store, &g, loss, self.cfg.actor_lr)?;
                    tally.add(pl, ent);
                }
            }
            let new_lp = ens.log_probs(m, &inputs[m], &buf.actions[m])?.0;
            for t in 0..buf.len() {
                factor[t] *= (new_lp[t] - buf.old_logp[m][t]).exp();
            }
            if factor.iter().any(|f| !f.is_finite()) {
                return Err(UpdateError::NonFinite("sequential correction factor".into()));
            }
            report.trace.push(TraceEntry {
                phase: Phase::Sequential,
                pipeline: None,
                agent: m,
            });
            report.kl_turns.push(TurnKl {
                agent: m,
                kl: kl_per_agent(old, ens, inputs)?,
            });
        }
        Ok(())
    }

    fn simultaneous(
        &self,
        ens: &mut PolicyEnsemble,
        buf: &RolloutBuffer,
        inputs: &[Tensor],
        rng: &mut ChaCha8Rng,
        report: &mut IterationReport,
        tally: &mut LossTally,
    ) -> Result<(), UpdateError> {
        let n = buf.n_agents;
        for epoch in self.epochs(buf, inputs, rng)? {
            for mb in epoch {
                let mut g = Graph::new();
                let mut terms = Vec::with_capacity(n);
                for i in 0..n {
                    let (r, ent) = live_ratio(&mut g, ens, i, &mb.inputs[i], &mb.actions[i], &mb.old[i])?;
                    let s = ppo_clip_surrogate(&mut g, r, &mb.pick(buf.joint_adv(i)), self.cfg.clip)?;
                    terms.push((s, ent));
                }
                let (loss, pl, ent) = stacked_loss(&mut g, &terms, self.cfg.entropy_coef)?;
                self.apply(&mut ens.store, &g, loss, self.cfg.actor_lr)?;
                tally.add(pl, ent);
            }
        }
        report.trace.extend((0..n).map(|i| TraceEntry {
            phase: Phase::Simultaneous,
            pipeline: None,
            agent: i,
        }));
        Ok(())
    }

    fn coppo(
        &self,
        ens: &mut PolicyEnsemble,
        buf: &RolloutBuffer,
        inputs: &[Tensor],
        rng: &mut ChaCha8Rng,
        report: &mut IterationReport,
        tally: &mut LossTally,
    ) -> Result<(), UpdateError> {
        let n = buf.n_agents;
        for epoch in self.epochs(buf, inputs, rng)? {
            for mb in epoch {
                // others' live ratios, frozen for this mini-batch
                let ratios: Vec<Vec<f64>> = (0..n)
                    .map(|l| {
                        let lp = ens.log_probs(l, &mb.inputs[l], &mb.actions[l])?.0;
                        Ok(lp.iter().zip(&mb.old[l]).map(|(a, b)| (a - b).exp()).collect())
                    })
                    .collect::<Result<_, UpdateError>>()?;
                let mut g = Graph::new();
                let mut terms = Vec::with_capacity(n);
                for i in 0..n {
                    let others: Vec<f64> = (0..mb.idx.len())
                        .map(|t| (0..n).filter(|&l| l != i).map(|l| ratios[l][t]).product())
                        .collect();
                    let (r, ent) = live_ratio(&mut g, ens, i, &mb.inputs[i], &mb.actions[i], &mb.old[i])?;
                    let s = coppo_surrogate(&mut g, r, &others, &mb.pick(buf.joint_adv(i)), self.cfg.clip, self.cfg.inner_clip())?;
                    terms.push((s, ent));
                }
                let (loss, pl, ent) = stacked_loss(&mut g, &terms, self.cfg.entropy_coef)?;
                self.apply(&mut ens.store, &g, loss, self.cfg.actor_lr)?;
                tally.add(pl, ent);
            }
        }
        report.trace.extend((0..n).map(|i| TraceEntry {
            phase: Phase::Simultaneous,
            pipeline: None,
            agent: i,
        }));
        Ok(())
    }

    /// Huber regression on the value targets; returns the mean loss.
    fn train_critic(&self, critic: &mut CriticNet, buf: &RolloutBuffer, rng: &mut ChaCha8Rng) -> Result<f64, UpdateError> {
        let inputs = buf.critic_inputs(critic)?;
        let streams = critic.streams();
        let mut total = 0.0;
        let mut steps = 0;
        for _ in 0..self.cfg.ppo_epochs {
            for idx in minibatches(buf.len(), self.cfg.num_mini_batch, rng)? {
                let mut g = Graph::new();
                let mut acc: Option<Var> = None;
                for (s, input) in inputs.iter().enumerate() {
                    let ret: Vec<f64> = idx.iter().map(|&t| buf.returns[s][t]).collect();
                    let l = critic.value_loss(&mut g, &input.select_rows(&idx), &ret, self.cfg.huber_delta)?;
                    acc = Some(match acc {
                        None => l,
                        Some(a) => g.add(a, l)?,
                    });
                }
                let sum = acc.ok_or_else(|| UpdateError::Shape("critic has no streams".into()))?;
                let loss = g.scale(sum, 1.0 / streams as f64);
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(UpdateError::NonFinite("value loss".into()));
                }
                total += v;
                steps += 1;
                self.apply(&mut critic.store, &g, loss, self.cfg.critic_lr)?;
            }
        }
        Ok(total / steps.max(1) as f64)
    }
}

#[cfg(test)]
mod tests;
