use nalgebra::{DMatrix, DVector};

use super::mdp::{AgentSet, TabularJointPolicy, TabularMdp};
use super::OracleError;

const RESIDUAL_TOL: f64 = 1e-10;

/// Exact values of a joint policy. `q` and `adv` are indexed
/// `[s * n_joint + ja]`; `rho` is the unnormalized discounted visitation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEvaluation {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub adv: Vec<f64>,
    pub rho: Vec<f64>,
    pub j: f64,
    n_joint: usize,
}

impl PolicyEvaluation {
    pub fn q(&self, s: usize, ja: usize) -> f64 {
        self.q[s * self.n_joint + ja]
    }

    pub fn a(&self, s: usize, ja: usize) -> f64 {
        self.adv[s * self.n_joint + ja]
    }

    pub fn max_abs_adv(&self) -> f64 {
        self.adv.iter().fold(0.0, |m, a| m.max(a.abs()))
    }
}

/// Joint probability of every flattened action in state `s`.
pub fn joint_probs(mdp: &TabularMdp, pol: &TabularJointPolicy, s: usize) -> Vec<f64> {
    let all = AgentSet::all(mdp.n_agents());
    (0..mdp.n_joint())
        .map(|ja| pol.prob_over(s, &mdp.decode(ja), all))
        .collect()
}

fn solve(m: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<Vec<f64>, OracleError> {
    let x = m
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| OracleError::Solver(format!("{what}: singular system")))?;
    let resid = (&m * &x - &b).amax();
    if !(resid < RESIDUAL_TOL) {
        return Err(OracleError::Solver(format!("{what}: residual {resid:e}")));
    }
    Ok(x.iter().copied().collect())
}

pub fn evaluate_policy(mdp: &TabularMdp, pol: &TabularJointPolicy) -> Result<PolicyEvaluation, OracleError> {
    pol.check_compatible(mdp)?;
    let (ns, nj, g) = (mdp.n_states(), mdp.n_joint(), mdp.gamma());
    let mut p_pi = DMatrix::<f64>::zeros(ns, ns);
    let mut r_pi = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        let jp = joint_probs(mdp, pol, s);
        for ja in 0..nj {
            r_pi[s] += jp[ja] * mdp.reward(s, ja);
            for (s2, p) in mdp.transition_row(s, ja).iter().enumerate() {
                p_pi[(s, s2)] += jp[ja] * p;
            }
        }
    }
    let eye = DMatrix::<f64>::identity(ns, ns);
    let v = solve(&eye - &p_pi * g, r_pi, "value")?;
    let rho = solve(
        &eye - p_pi.transpose() * g,
        DVector::from_column_slice(mdp.rho0()),
        "visitation",
    )?;
    let mut q = vec![0.0; ns * nj];
    let mut adv = vec![0.0; ns * nj];
    for s in 0..ns {
        for ja in 0..nj {
            let next: f64 = mdp.transition_row(s, ja).iter().zip(&v).map(|(p, v)| p * v).sum();
            q[s * nj + ja] = mdp.reward(s, ja) + g * next;
            adv[s * nj + ja] = q[s * nj + ja] - v[s];
        }
    }
    let j = mdp.rho0().iter().zip(&v).map(|(p, v)| p * v).sum();
    Ok(PolicyEvaluation {
        v,
        q,
        adv,
        rho,
        j,
        n_joint: nj,
    })
}

fn check_actions(mdp: &TabularMdp, s: usize, a: &[usize], subset: AgentSet) -> Result<(), OracleError> {
    if s >= mdp.n_states() {
        return Err(OracleError::Index(format!("state {s}")));
    }
    if a.len() != mdp.n_agents() {
        return Err(OracleError::Dimension(format!("{} actions for {} agents", a.len(), mdp.n_agents())));
    }
    for i in subset.iter(mdp.n_agents()) {
        if a[i] >= mdp.actions()[i] {
            return Err(OracleError::Index(format!("agent {i} action {}", a[i])));
        }
    }
    Ok(())
}

/// `Q^{subset}(s, a^{subset})`: the joint Q with the complement's actions
/// averaged out under `pol`. Entries of `a` outside `subset` are ignored.
pub fn multi_agent_q(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    pol: &TabularJointPolicy,
    subset: AgentSet,
    s: usize,
    a: &[usize],
) -> Result<f64, OracleError> {
    check_actions(mdp, s, a, subset)?;
    Ok(multi_agent_q_unchecked(mdp, eval, pol, subset, s, a))
}

pub(crate) fn multi_agent_q_unchecked(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    pol: &TabularJointPolicy,
    subset: AgentSet,
    s: usize,
    a: &[usize],
) -> f64 {
    let n = mdp.n_agents();
    let rest = subset.complement(n);
    let mut total = 0.0;
    for ja in 0..mdp.n_joint() {
        let b = mdp.decode(ja);
        if subset.iter(n).any(|i| b[i] != a[i]) {
            continue;
        }
        total += pol.prob_over(s, &b, rest) * eval.q(s, ja);
    }
    total
}

/// `A^{i_set}(s, a^{j_set}, a^{i_set}) = Q^{j ∪ i} − Q^{j}`.
pub fn multi_agent_advantage(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    pol: &TabularJointPolicy,
    j_set: AgentSet,
    i_set: AgentSet,
    s: usize,
    a: &[usize],
) -> Result<f64, OracleError> {
    if !j_set.disjoint(i_set) {
        return Err(OracleError::Overlap);
    }
    check_actions(mdp, s, a, j_set.union(i_set))?;
    Ok(multi_agent_q_unchecked(mdp, eval, pol, j_set.union(i_set), s, a)
        - multi_agent_q_unchecked(mdp, eval, pol, j_set, s, a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionResidual {
    /// Residual of the sequential sum along the ordering.
    pub sequential: f64,
    /// Two-term residual for each separated agent `i_p`, indexed by p.
    pub two_term: Vec<f64>,
}

impl DecompositionResidual {
    pub fn max(&self) -> f64 {
        self.two_term.iter().fold(self.sequential, |m, &r| m.max(r))
    }
}

pub fn decomposition_residual(
    mdp: &TabularMdp,
    eval: &PolicyEvaluation,
    pol: &TabularJointPolicy,
    s: usize,
    a: &[usize],
    ordering: &[usize],
) -> Result<DecompositionResidual, OracleError> {
    let n = mdp.n_agents();
    let mut seen = vec![false; n];
    if ordering.len() != n || ordering.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(OracleError::Invalid("ordering is not a permutation".into()));
    }
    let all = AgentSet::all(n);
    check_actions(mdp, s, a, all)?;
    let full = eval.a(s, mdp.encode(a)?);
    let mut before = AgentSet::EMPTY;
    let mut sum = 0.0;
    for &i in ordering {
        sum += multi_agent_advantage(mdp, eval, pol, before, AgentSet::single(i), s, a)?;
        before = before.union(AgentSet::single(i));
    }
    let mut two_term = Vec::with_capacity(n);
    for &ip in ordering {
        let one = AgentSet::single(ip);
        let first = multi_agent_advantage(mdp, eval, pol, AgentSet::EMPTY, one, s, a)?;
        let second = multi_agent_advantage(mdp, eval, pol, one, one.complement(n), s, a)?;
        two_term.push((full - first - second).abs());
    }
    Ok(DecompositionResidual {
        sequential: (full - sum).abs(),
        two_term,
    })
}
