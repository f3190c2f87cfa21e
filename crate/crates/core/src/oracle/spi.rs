//! Safe penalty iteration on tabular softmax logits.
//!
//! One iteration runs penalized gradient ascent for the independent step of
//! every pipeline, checks the exact μ constraint, runs the dependent step for
//! the selected agents and finally gates the candidate on the shared lower
//! bound. A rejected candidate is retried with half the step size before the
//! iteration gives up and returns the old logits.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::bound::{kl, kl_max, mu_exact, penalty_coefficient, shared_lower_bound, AdvantageSplit};
use super::eval::{evaluate_policy, multi_agent_q_unchecked, PolicyEvaluation};
use super::mdp::{softmax, AgentSet, TabularJointPolicy, TabularMdp};
use super::OracleError;
use crate::updaters::selection::PipelineAssignment;

const BOUND_SLACK: f64 = 1e-12;
const MONOTONE_TOL: f64 = 1e-9;
const LINE_SEARCH_HALVINGS: usize = 40;
const STEP_RETRIES: usize = 12;

/// Softmax logits, either one table per agent or one table for everyone.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularLogits {
    shared: bool,
    n_agents: usize,
    tables: Vec<Vec<Vec<f64>>>,
}

impl TabularLogits {
    pub fn zeros(mdp: &TabularMdp, shared: bool) -> Result<Self, OracleError> {
        Self::build(mdp, shared, |_| 0.0)
    }

    pub fn random<R: Rng>(rng: &mut R, mdp: &TabularMdp, shared: bool, scale: f64) -> Result<Self, OracleError> {
        Self::build(mdp, shared, |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
    }

    fn build(mdp: &TabularMdp, shared: bool, mut f: impl FnMut(usize) -> f64) -> Result<Self, OracleError> {
        let acts = mdp.actions();
        if shared && acts.iter().any(|&a| a != acts[0]) {
            return Err(OracleError::Invalid("shared logits need equal action counts".into()));
        }
        let count = if shared { 1 } else { mdp.n_agents() };
        let tables = (0..count)
            .map(|t| {
                (0..mdp.n_states())
                    .map(|_| (0..acts[t]).map(&mut f).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            shared,
            n_agents: mdp.n_agents(),
            tables,
        })
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    fn table_of(&self, agent: usize) -> usize {
        if self.shared {
            0
        } else {
            agent
        }
    }

    pub fn logits(&self, agent: usize) -> &[Vec<f64>] {
        &self.tables[self.table_of(agent)]
    }

    pub fn policy(&self) -> TabularJointPolicy {
        let probs = (0..self.n_agents)
            .map(|i| self.logits(i).iter().map(|l| softmax(l)).collect())
            .collect();
        TabularJointPolicy::new(probs).expect("softmax rows are distributions")
    }

    fn axpy(&self, k: f64, dir: &[Vec<Vec<f64>>]) -> Self {
        let mut out = self.clone();
        for (t, d) in out.tables.iter_mut().zip(dir) {
            for (row, drow) in t.iter_mut().zip(d) {
                for (x, y) in row.iter_mut().zip(drow) {
                    *x += k * y;
                }
            }
        }
        out
    }

    fn zeros_like(&self) -> Vec<Vec<Vec<f64>>> {
        self.tables
            .iter()
            .map(|t| t.iter().map(|r| vec![0.0; r.len()]).collect())
            .collect()
    }
}

/// One penalized linear term: `Σ_s Σ_b π_θ^m(b|s)·h(s,b) − C·KLmax(π_k^m ‖ π_θ^m)`.
/// `h` already carries the visitation weight.
struct Term {
    agent: usize,
    h: Vec<Vec<f64>>,
}

struct Problem<'a> {
    terms: Vec<Term>,
    c: f64,
    anchor: &'a TabularJointPolicy,
}

impl Problem<'_> {
    fn value(&self, theta: &TabularLogits) -> f64 {
        let pol = theta.policy();
        self.terms
            .iter()
            .map(|t| {
                let lin: f64 = t
                    .h
                    .iter()
                    .enumerate()
                    .map(|(s, hs)| hs.iter().zip(pol.row(t.agent, s)).map(|(h, p)| h * p).sum::<f64>())
                    .sum();
                lin - self.c * kl_max(self.anchor, &pol, t.agent, t.h.len())
            })
            .sum()
    }

    fn gradient(&self, theta: &TabularLogits) -> Vec<Vec<Vec<f64>>> {
        let pol = theta.policy();
        let mut g = theta.zeros_like();
        for t in &self.terms {
            let tab = theta.table_of(t.agent);
            let ns = t.h.len();
            for s in 0..ns {
                let p = pol.row(t.agent, s);
                let mean: f64 = p.iter().zip(&t.h[s]).map(|(p, h)| p * h).sum();
                for b in 0..p.len() {
                    g[tab][s][b] += p[b] * (t.h[s][b] - mean);
                }
            }
            // subgradient of the max through its arg-max state
            let kls: Vec<f64> = (0..ns)
                .map(|s| kl(self.anchor.row(t.agent, s), pol.row(t.agent, s)))
                .collect();
            let s_star = argmax(&kls);
            if kls[s_star] > 0.0 {
                let p = pol.row(t.agent, s_star);
                let q = self.anchor.row(t.agent, s_star);
                for b in 0..p.len() {
                    g[tab][s_star][b] -= self.c * (p[b] - q[b]);
                }
            }
        }
        g
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn ascend(problem: &Problem, start: &TabularLogits, steps: usize, step_size: f64) -> Result<TabularLogits, OracleError> {
    let mut theta = start.clone();
    if step_size == 0.0 {
        return Ok(theta);
    }
    for _ in 0..steps {
        let f0 = problem.value(&theta);
        let g = problem.gradient(&theta);
        if g.iter().flatten().flatten().any(|v| !v.is_finite()) || !f0.is_finite() {
            return Err(OracleError::NonFinite("penalty gradient".into()));
        }
        let mut eta = step_size;
        let mut moved = false;
        for _ in 0..LINE_SEARCH_HALVINGS {
            let cand = theta.axpy(eta, &g);
            if problem.value(&cand) >= f0 {
                theta = cand;
                moved = true;
                break;
            }
            eta *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(theta)
}

#[derive(Clone, Debug)]
pub struct SpiOutcome {
    pub logits: TabularLogits,
    pub policy: TabularJointPolicy,
    pub accepted: bool,
    pub constraint_met: bool,
    pub j_old: f64,
    pub j_new: f64,
    pub lower_bound: f64,
    /// Step-size halvings spent on bound rejections.
    pub retries: usize,
}

/// `g_i(s, b) = ρ(s)·A^i(s, ∅, b)`.
fn independent_terms(mdp: &TabularMdp, eval: &PolicyEvaluation, pol: &TabularJointPolicy, order: &[usize]) -> Vec<Term> {
    let n = mdp.n_agents();
    order
        .iter()
        .map(|&i| {
            let h = (0..mdp.n_states())
                .map(|s| {
                    (0..mdp.actions()[i])
                        .map(|b| {
                            let mut a = vec![0; n];
                            a[i] = b;
                            eval.rho[s] * (multi_agent_q_unchecked(mdp, eval, pol, AgentSet::single(i), s, &a) - eval.v[s])
                        })
                        .collect()
                })
                .collect();
            Term { agent: i, h }
        })
        .collect()
}

/// Linear coefficients of pipeline p's dependent objective in `π^{j_p}`:
/// `ρ(s)·Σ_{a: a^{j_p}=b} π_{k+½}^{−j_p}(a)·A^{−i_p}(s, a^{i_p}, a^{−i_p})`.
fn dependent_terms(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    pol_k: &TabularJointPolicy,
    pol_half: &TabularJointPolicy,
    assignment: &PipelineAssignment,
) -> Vec<Term> {
    let n = mdp.n_agents();
    let nj = mdp.n_joint();
    (0..n)
        .map(|p| {
            let (ip, jp) = (assignment.i_order[p], assignment.j_order[p]);
            let one = AgentSet::single(ip);
            let others = AgentSet::single(jp).complement(n);
            let mut h = vec![vec![0.0; mdp.actions()[jp]]; mdp.n_states()];
            for s in 0..mdp.n_states() {
                for ja in 0..nj {
                    let a = mdp.decode(ja);
                    let adv = eval.q(s, ja) - multi_agent_q_unchecked(mdp, eval, pol_k, one, s, &a);
                    h[s][a[jp]] += eval.rho[s] * pol_half.prob_over(s, &a, others) * adv;
                }
            }
            Term { agent: jp, h }
        })
        .collect()
}

fn sum_mu(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    inter: &TabularJointPolicy,
    other: &TabularJointPolicy,
    split: &AdvantageSplit,
) -> Result<f64, OracleError> {
    (0..mdp.n_agents())
        .map(|i| mu_exact(mdp, eval, inter, other, i, split))
        .sum()
}

pub fn safe_penalty_iteration(
    mdp: &TabularMdp,
    logits_k: &TabularLogits,
    assignment: &PipelineAssignment,
    steps: usize,
    step_size: f64,
) -> Result<SpiOutcome, OracleError> {
    let n = mdp.n_agents();
    if assignment.i_order.len() != n {
        return Err(OracleError::Dimension("assignment size".into()));
    }
    if !(step_size >= 0.0) || !step_size.is_finite() {
        return Err(OracleError::Invalid(format!("step size {step_size}")));
    }
    let pol_k = logits_k.policy();
    pol_k.check_compatible(mdp)?;
    let eval_k = evaluate_policy(mdp, &pol_k)?;
    let c = penalty_coefficient(mdp, &eval_k);
    let split = AdvantageSplit::average(&eval_k, n);
    let ind = Problem {
        terms: independent_terms(mdp, &eval_k, &pol_k, &assignment.i_order),
        c,
        anchor: &pol_k,
    };

    let mut eta = step_size;
    for retry in 0..=STEP_RETRIES {
        let half = ascend(&ind, logits_k, steps, eta)?;
        let pol_half = half.policy();
        let constraint_met = sum_mu(mdp, &eval_k, &pol_half, &pol_half, &split)?
            >= sum_mu(mdp, &eval_k, &pol_half, &pol_k, &split)?;
        let next = if constraint_met {
            let dep = Problem {
                terms: dependent_terms(mdp, &eval_k, &pol_k, &pol_half, assignment),
                c,
                anchor: &pol_k,
                    };
            let moved = ascend(&dep, &half, steps, eta)?;
            if half.is_shared() {
                moved
            } else {
                // each selected agent keeps the table its own pipeline produced
                let mut out = half.clone();
                for p in 0..n {
                    let jp = assignment.j_order[p];
                    out.tables[jp] = moved.tables[jp].clone();
                }
                out
            }
        } else {
            half
        };
        let pol_next = next.policy();
        let bound = shared_lower_bound(mdp, &eval_k, &pol_k, &pol_next)?;
        if bound >= eval_k.j - BOUND_SLACK {
            let j_new = evaluate_policy(mdp, &pol_next)?.j;
            if j_new < eval_k.j - MONOTONE_TOL {
                return Err(OracleError::Invariant(format!(
                    "accepted candidate lowered J from {} to {j_new}",
                    eval_k.j
                )));
            }
            return Ok(SpiOutcome {
                logits: next,
                policy: pol_next,
                accepted: true,
                constraint_met,
                j_old: eval_k.j,
                j_new,
                lower_bound: bound,
                retries: retry,
            });
        }
        eta *= 0.5;
    }
    Ok(SpiOutcome {
        logits: logits_k.clone(),
        policy: pol_k,
        accepted: false,
        constraint_met: false,
        j_old: eval_k.j,
        j_new: eval_k.j,
        lower_bound: f64::NAN,
        retries: STEP_RETRIES,
    })
}
