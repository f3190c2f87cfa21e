use rand::Rng;
use rand_distr::{Distribution, Exp1};

use super::eval::{joint_probs, multi_agent_q_unchecked, PolicyEvaluation};
use super::mdp::{AgentSet, TabularJointPolicy, TabularMdp};
use super::OracleError;

const SPLIT_TOL: f64 = 1e-10;

/// `4γ·max|A| / (1−γ)²`.
pub fn penalty_coefficient(mdp: &TabularMdp, eval: &PolicyEvaluation) -> f64 {
    let g = mdp.gamma();
    4.0 * g * eval.max_abs_adv() / ((1.0 - g) * (1.0 - g))
}

/// `KL(p ‖ q)` with `0·ln(0/x) = 0`; infinite when q misses mass of p.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum()
}

/// `max_s KL(π_old^i(·|s) ‖ π_new^i(·|s))`.
pub fn kl_max(old: &TabularJointPolicy, new: &TabularJointPolicy, agent: usize, n_states: usize) -> f64 {
    (0..n_states)
        .map(|s| kl(old.row(agent, s), new.row(agent, s)))
        .fold(0.0, f64::max)
}

/// Takes agent i's table from `sources[i]`.
pub fn mix_policies(sources: &[&TabularJointPolicy]) -> TabularJointPolicy {
    let mut out = sources[0].clone();
    for (i, src) in sources.iter().enumerate().skip(1) {
        out = out.with_agent(i, src.agent_table(i).to_vec());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateTerms {
    pub c: f64,
    pub kl_max: Vec<f64>,
    pub m_value: f64,
}

/// Table of `A^{i_set}(s, a^{j_set}, a^{i_set})` over `(s, ja)`.
pub fn multi_agent_advantage_table(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    pol: &TabularJointPolicy,
    j_set: AgentSet,
    i_set: AgentSet,
) -> Vec<f64> {
    let nj = mdp.n_joint();
    let mut out = vec![0.0; mdp.n_states() * nj];
    for s in 0..mdp.n_states() {
        for ja in 0..nj {
            let a = mdp.decode(ja);
            out[s * nj + ja] = multi_agent_q_unchecked(mdp, eval, pol, j_set.union(i_set), s, &a)
                - multi_agent_q_unchecked(mdp, eval, pol, j_set, s, &a);
        }
    }
    out
}

fn check_pair(mdp: &TabularMdp, old: &TabularJointPolicy, new: &TabularJointPolicy) -> Result<(), OracleError> {
    old.check_compatible(mdp)?;
    new.check_compatible(mdp)
}

/// Definition-style surrogate `M^{i_set}(a^{j_set}, ·)` of `pol_new` around
/// `pol_old`, with the per-agent max-KL penalty.
pub fn surrogate_m(
    mdp: &TabularMdp,
    eval_old: &PolicyEvaluation,
    pol_old: &TabularJointPolicy,
    pol_new: &TabularJointPolicy,
    j_set: AgentSet,
    i_set: AgentSet,
) -> Result<SurrogateTerms, OracleError> {
    if !j_set.disjoint(i_set) {
        return Err(OracleError::Overlap);
    }
    check_pair(mdp, pol_old, pol_new)?;
    let n = mdp.n_agents();
    let c = penalty_coefficient(mdp, eval_old);
    let kls: Vec<f64> = (0..n).map(|i| kl_max(pol_old, pol_new, i, mdp.n_states())).collect();
    let penalty: f64 = i_set.iter(n).map(|i| kls[i]).sum::<f64>() * c;
    let m_value = if penalty.is_infinite() {
        f64::NEG_INFINITY
    } else {
        let table = multi_agent_advantage_table(mdp, eval_old, pol_old, j_set, i_set);
        let nj = mdp.n_joint();
        let mut gain = 0.0;
        for s in 0..mdp.n_states() {
            let jp = joint_probs(mdp, pol_new, s);
            gain += eval_old.rho[s] * (0..nj).map(|ja| jp[ja] * table[s * nj + ja]).sum::<f64>();
        }
        gain - penalty
    };
    Ok(SurrogateTerms {
        c,
        kl_max: kls,
        m_value,
    })
}

/// Shared lower bound through the joint importance ratio. States or actions
/// where `π_old` is zero contribute nothing to the expectation.
pub fn shared_lower_bound(
    mdp: &TabularMdp,
    eval_old: &PolicyEvaluation,
    pol_old: &TabularJointPolicy,
    pol_new: &TabularJointPolicy,
) -> Result<f64, OracleError> {
    check_pair(mdp, pol_old, pol_new)?;
    let n = mdp.n_agents();
    let c = penalty_coefficient(mdp, eval_old);
    let kl_sum: f64 = (0..n).map(|i| kl_max(pol_old, pol_new, i, mdp.n_states())).sum();
    if kl_sum.is_infinite() {
        return Ok(f64::NEG_INFINITY);
    }
    let mut gain = 0.0;
    for s in 0..mdp.n_states() {
        let mut inner = 0.0;
        for ja in 0..mdp.n_joint() {
            let a = mdp.decode(ja);
            let mut p_old = 1.0;
            let mut ratio = 1.0;
            for i in 0..n {
                let po = pol_old.prob(i, s, a[i]);
                p_old *= po;
                if po > 0.0 {
                    ratio *= pol_new.prob(i, s, a[i]) / po;
                }
            }
            if p_old > 0.0 {
                inner += p_old * ratio * eval_old.a(s, ja);
            }
        }
        gain += eval_old.rho[s] * inner;
    }
    Ok(eval_old.j + gain - c * kl_sum)
}

/// The same bound assembled from pipeline `p`'s two surrogates.
pub fn pipeline_bound(
    mdp: &TabularMdp,
    eval_old: &PolicyEvaluation,
    pol_old: &TabularJointPolicy,
    pol_new: &TabularJointPolicy,
    p: usize,
) -> Result<f64, OracleError> {
    let one = AgentSet::single(p);
    let first = surrogate_m(mdp, eval_old, pol_old, pol_new, AgentSet::EMPTY, one)?;
    let second = surrogate_m(mdp, eval_old, pol_old, pol_new, one, one.complement(mdp.n_agents()))?;
    Ok(eval_old.j + first.m_value + second.m_value)
}

/// Gaps between the exact-expectation forms of the two pipeline objectives
/// and their importance-sampled forms under `π_old`.
pub fn importance_equivalence_gap(
    mdp: &TabularMdp,
    eval_old: &PolicyEvaluation,
    pol_old: &TabularJointPolicy,
    pol_new: &TabularJointPolicy,
    p: usize,
) -> Result<(f64, f64), OracleError> {
    check_pair(mdp, pol_old, pol_new)?;
    let n = mdp.n_agents();
    let nj = mdp.n_joint();
    let one = AgentSet::single(p);
    let rest = one.complement(n);
    let first_tab = multi_agent_advantage_table(mdp, eval_old, pol_old, AgentSet::EMPTY, one);
    let second_tab = multi_agent_advantage_table(mdp, eval_old, pol_old, one, rest);
    let (mut lhs1, mut rhs1, mut lhs2, mut rhs2) = (0.0, 0.0, 0.0, 0.0);
    for s in 0..mdp.n_states() {
        let rho = eval_old.rho[s];
        for ja in 0..nj {
            let a = mdp.decode(ja);
            let p_old = pol_old.prob_over(s, &a, AgentSet::all(n));
            // exact side: agent p's new policy alone, then the full new joint
            let p_new_p = pol_new.prob(p, s, a[p]) * pol_old.prob_over(s, &a, rest);
            let p_new = pol_new.prob_over(s, &a, AgentSet::all(n));
            lhs1 += rho * p_new_p * first_tab[s * nj + ja];
            lhs2 += rho * p_new * second_tab[s * nj + ja];
            if p_old > 0.0 {
                let r_p = pol_new.prob(p, s, a[p]) / pol_old.prob(p, s, a[p]);
                let r_rest = pol_new.prob_over(s, &a, rest) / pol_old.prob_over(s, &a, rest);
                let adv = eval_old.a(s, ja);
                rhs1 += rho * p_old * r_p * adv;
                rhs2 += rho * p_old * (r_rest - 1.0) * r_p * adv;
            }
        }
    }
    Ok(((lhs1 - rhs1).abs(), (lhs2 - rhs2).abs()))
}

/// Per-agent scalars `A^i(s, a)` that sum to the joint advantage.
/// Indexed `[agent][s * n_joint + ja]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageSplit {
    per_agent: Vec<Vec<f64>>,
}

impl AdvantageSplit {
    pub fn new(eval: &PolicyEvaluation, per_agent: Vec<Vec<f64>>) -> Result<Self, OracleError> {
        let len = eval.adv.len();
        if per_agent.is_empty() || per_agent.iter().any(|t| t.len() != len) {
            return Err(OracleError::Dimension("split table size".into()));
        }
        for k in 0..len {
            let s: f64 = per_agent.iter().map(|t| t[k]).sum();
            if (s - eval.adv[k]).abs() > SPLIT_TOL {
                return Err(OracleError::Invalid(format!(
                    "split entry {k} sums to {s}, advantage is {}",
                    eval.adv[k]
                )));
            }
        }
        Ok(Self { per_agent })
    }

    pub fn average(eval: &PolicyEvaluation, n: usize) -> Self {
        let t: Vec<f64> = eval.adv.iter().map(|a| a / n as f64).collect();
        Self {
            per_agent: vec![t; n],
        }
    }

    /// Uniform-Dirichlet weights per entry; the last agent takes the remainder.
    pub fn random<R: Rng>(eval: &PolicyEvaluation, n: usize, rng: &mut R) -> Self {
        let mut per_agent = vec![vec![0.0; eval.adv.len()]; n];
        for (k, &a) in eval.adv.iter().enumerate() {
            let w = dirichlet_uniform(n, rng);
            let mut used = 0.0;
            for i in 0..n - 1 {
                per_agent[i][k] = w[i] * a;
                used += per_agent[i][k];
            }
            per_agent[n - 1][k] = a - used;
        }
        Self { per_agent }
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.per_agent[i]
    }
}

/// Weights drawn from Dirichlet(1, ..., 1).
pub fn dirichlet_uniform<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `μ(π_other^{−i})`: agent i acts from `pol_intermediate`, the rest from
/// `pol_other`, states from the old visitation.
pub fn mu_exact(
    mdp: &TabularMdp,
    eval_old: &PolicyEvaluation,
    pol_intermediate: &TabularJointPolicy,
    pol_other: &TabularJointPolicy,
    i: usize,
    split: &AdvantageSplit,
) -> Result<f64, OracleError> {
    check_pair(mdp, pol_intermediate, pol_other)?;
    if i >= mdp.n_agents() || split.per_agent.len() != mdp.n_agents() {
        return Err(OracleError::Index(format!("agent {i}")));
    }
    let n = mdp.n_agents();
    let nj = mdp.n_joint();
    let rest = AgentSet::single(i).complement(n);
    let table = split.agent(i);
    let mut total = 0.0;
    for s in 0..mdp.n_states() {
        let mut inner = 0.0;
        for ja in 0..nj {
            let a = mdp.decode(ja);
            let p = pol_intermediate.prob(i, s, a[i]) * pol_other.prob_over(s, &a, rest);
            inner += p * table[s * nj + ja];
        }
        total += eval_old.rho[s] * inner;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::evaluate_policy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_hand_value() {
        let v = kl(&[0.5, 0.5], &[0.75, 0.25]);
        let want = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((v - want).abs() < 1e-15);
        assert!((v - 0.1438).abs() < 1e-4);
        assert!(kl(&[0.5, 0.5], &[1.0, 0.0]).is_infinite());
        assert_eq!(kl(&[1.0, 0.0], &[0.5, 0.5]), 2f64.ln());
    }

    #[test]
    fn unchanged_policy_has_zero_surrogate_and_exact_bound() {
        let g = TabularMdp::two_guard();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pol = TabularJointPolicy::random(&mut rng, &g, 1.0);
        let ev = evaluate_policy(&g, &pol).unwrap();
        let m = surrogate_m(&g, &ev, &pol, &pol, AgentSet::EMPTY, AgentSet::single(1)).unwrap();
        assert!(m.m_value.abs() < 1e-12);
        assert!(m.kl_max.iter().all(|&k| k == 0.0));
        assert!((shared_lower_bound(&g, &ev, &pol, &pol).unwrap() - ev.j).abs() < 1e-12);
    }

    #[test]
    fn unbounded_kl_gives_minus_infinity() {
        let g = TabularMdp::two_guard();
        let old = TabularJointPolicy::uniform(&g);
        let new = old.with_agent(0, vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        let ev = evaluate_policy(&g, &old).unwrap();
        assert_eq!(shared_lower_bound(&g, &ev, &old, &new).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn split_must_sum_to_advantage() {
        let g = TabularMdp::two_guard();
        let pol = TabularJointPolicy::uniform(&g);
        let ev = evaluate_policy(&g, &pol).unwrap();
        let bad = vec![ev.adv.clone(), ev.adv.clone()];
        assert!(AdvantageSplit::new(&ev, bad).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = AdvantageSplit::random(&ev, 2, &mut rng);
        assert!(AdvantageSplit::new(&ev, r.per_agent.clone()).is_ok());
    }

    #[test]
    fn mu_sums_vanish_at_the_old_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = TabularMdp::random(&mut rng, vec![2, 2, 3], 3, 0.9);
        let pol = TabularJointPolicy::random(&mut rng, &m, 1.0);
        let ev = evaluate_policy(&m, &pol).unwrap();
        let avg = AdvantageSplit::average(&ev, 3);
        let rnd = AdvantageSplit::random(&ev, 3, &mut rng);
        let sum = |sp: &AdvantageSplit| -> f64 { (0..3).map(|i| mu_exact(&m, &ev, &pol, &pol, i, sp).unwrap()).sum() };
        assert!(sum(&avg).abs() < 1e-10);
        assert!((sum(&avg) - sum(&rnd)).abs() < 1e-10);
    }
}
