//! Verification suites. Each `measure_*` function reports raw quantities;
//! [`run_suite`] turns them into pass/fail verdicts with the default limits.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::ExperimentError;
use crate::envs::ActionSpace;
use crate::nn::{bind_sharing, forward, Gradients, Graph, HeadKind, HeadOut, MlpSpec, ParamStore, SharingMode, SlotId, Tensor, Var};
use crate::oracle::mdp::softmax;
use crate::oracle::{
    decomposition_residual, evaluate_policy, importance_equivalence_gap, mu_exact, pipeline_bound, safe_penalty_iteration,
    shared_lower_bound, AdvantageSplit, TabularJointPolicy, TabularLogits, TabularMdp,
};
use crate::policies::{Action, PolicyEnsemble};
use crate::rollout::{gae, RolloutBuffer};
use crate::updaters::{fp3o_objective, live_ratio, mu_estimates, nonoverlapping_selection, nonoverlapping_selection_from, ppo_clip_surrogate};

/// Default limits used by the CLI.
pub mod limits {
    pub const IDENTITY: f64 = 1e-10;
    pub const MONOTONE: f64 = 1e-9;
    pub const IMPROVED_FRACTION: f64 = 0.9;
    pub const SIGMAS: f64 = 3.0;
    pub const COVERAGE: f64 = 0.9;
    pub const FINITE_DIFF: f64 = 1e-4;
    pub const SHARED_SUM: f64 = 1e-12;
    pub const EQUIVALENCE: f64 = 1e-10;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Gradients,
    Schemes,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "oracle" => Some(Self::Oracle),
            "gradients" => Some(Self::Gradients),
            "schemes" => Some(Self::Schemes),
            "all" => Some(Self::All),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub suite: &'static str,
    pub check: String,
    pub passed: bool,
    pub measured: f64,
    pub limit: f64,
    pub detail: String,
}

fn verdict(suite: &'static str, check: &str, measured: f64, limit: f64, passed: bool, detail: String) -> Verdict {
    Verdict {
        suite,
        check: check.into(),
        passed,
        measured,
        limit,
        detail,
    }
}

fn below(suite: &'static str, check: &str, measured: f64, limit: f64, detail: String) -> Verdict {
    verdict(suite, check, measured, limit, measured < limit, detail)
}

// ---------------------------------------------------------------------------
// tabular identities

#[derive(Clone, Debug, Default, Serialize)]
pub struct OracleIdentities {
    pub mdps: usize,
    pub pairs: usize,
    pub decomposition: f64,
    pub two_term: f64,
    pub cross_pipeline: f64,
    pub importance_gap: f64,
    /// Smallest `J(π̃) − L^S(π̃)` over the policy pairs.
    pub min_bound_slack: f64,
    pub seconds: f64,
}

/// `count` random MDPs with 2–3 agents, 1–4 states and 2–3 actions each.
pub fn random_mdps(count: usize, rng: &mut ChaCha8Rng) -> Vec<TabularMdp> {
    (0..count)
        .map(|_| {
            let n = rng.random_range(2..=3);
            let actions = (0..n).map(|_| rng.random_range(2..=3)).collect();
            let states = rng.random_range(1..=4);
            let gamma = rng.random_range(0.5..0.95);
            TabularMdp::random(rng, actions, states, gamma)
        })
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

/// Moves every row of `pol` by Gaussian logit noise of size `scale`.
pub fn perturb(pol: &TabularJointPolicy, mdp: &TabularMdp, scale: f64, rng: &mut ChaCha8Rng) -> TabularJointPolicy {
    let probs = (0..mdp.n_agents())
        .map(|i| {
            (0..mdp.n_states())
                .map(|s| {
                    let l: Vec<f64> = pol
                        .row(i, s)
                        .iter()
                        .map(|p| p.ln() + scale * Distribution::<f64>::sample(&StandardNormal, rng))
                        .collect();
                    softmax(&l)
                })
                .collect()
        })
        .collect();
    TabularJointPolicy::new(probs).expect("softmax rows")
}

/// Residuals of the advantage decompositions and bound identities on
/// TwoGuard plus `n_random` random MDPs, and the bound slack on `n_pairs`
/// policy pairs.
pub fn measure_oracle_identities(n_random: usize, n_pairs: usize, seed: u64) -> Result<OracleIdentities, ExperimentError> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mdps = vec![TabularMdp::two_guard()];
    mdps.extend(random_mdps(n_random, &mut rng));
    let mut out = OracleIdentities {
        mdps: mdps.len(),
        pairs: n_pairs,
        min_bound_slack: f64::INFINITY,
        ..Default::default()
    };
    for mdp in &mdps {
        let n = mdp.n_agents();
        let pol = TabularJointPolicy::random(&mut rng, mdp, 1.0);
        let ev = evaluate_policy(mdp, &pol)?;
        for ordering in permutations(n) {
            for s in 0..mdp.n_states() {
                for ja in 0..mdp.n_joint() {
                    let r = decomposition_residual(mdp, &ev, &pol, s, &mdp.decode(ja), &ordering)?;
                    out.decomposition = out.decomposition.max(r.sequential);
                    out.two_term = r.two_term.iter().fold(out.two_term, |m, &v| m.max(v));
                }
            }
        }
        let new = perturb(&pol, mdp, 0.5, &mut rng);
        let shared = shared_lower_bound(mdp, &ev, &pol, &new)?;
        for p in 0..n {
            let b = pipeline_bound(mdp, &ev, &pol, &new, p)?;
            out.cross_pipeline = out.cross_pipeline.max((b - shared).abs());
            let (g1, g2) = importance_equivalence_gap(mdp, &ev, &pol, &new, p)?;
            out.importance_gap = out.importance_gap.max(g1).max(g2);
        }
    }
    for k in 0..n_pairs {
        let mdp = &mdps[k % mdps.len()];
        let old = TabularJointPolicy::random(&mut rng, mdp, 1.0);
        let scale = [0.01, 0.1, 1.0, 3.0][k % 4];
        let new = perturb(&old, mdp, scale, &mut rng);
        let ev = evaluate_policy(mdp, &old)?;
        let j_new = evaluate_policy(mdp, &new)?.j;
        let lower = shared_lower_bound(mdp, &ev, &old, &new)?;
        out.min_bound_slack = out.min_bound_slack.min(j_new - lower);
    }
    out.seconds = t0.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SpiRun {
    pub instance: String,
    pub shared: bool,
    pub j_initial: f64,
    pub j_final: f64,
    /// Largest single-iteration decrease of J.
    pub max_drop: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpiMonotonicity {
    pub runs: Vec<SpiRun>,
    pub seconds: f64,
}

impl SpiMonotonicity {
    pub fn max_drop(&self) -> f64 {
        self.runs.iter().map(|r| r.max_drop).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn improved_fraction(&self) -> f64 {
        self.runs.iter().filter(|r| r.j_final > r.j_initial).count() as f64 / self.runs.len().max(1) as f64
    }
}

/// Safe penalty iteration from random logits on TwoGuard and `n_random`
/// random 2–3-agent MDPs, with shared and with per-agent logit tables.
pub fn measure_spi(n_random: usize, iterations: usize, seed: u64) -> Result<SpiMonotonicity, ExperimentError> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = vec![("two_guard".to_string(), TabularMdp::two_guard())];
    for k in 0..n_random {
        let n = rng.random_range(2..=3);
        let a = rng.random_range(2..=3);
        let states = rng.random_range(2..=4);
        let gamma = rng.random_range(0.6..0.95);
        let mdp = TabularMdp::random(&mut rng, vec![a; n], states, gamma);
        instances.push((format!("random{k}"), mdp));
    }
    let mut runs = Vec::new();
    for (name, mdp) in &instances {
        let asg = nonoverlapping_selection(mdp.n_agents(), 1)?;
        for shared in [false, true] {
            let mut th = TabularLogits::random(&mut rng, mdp, shared, 0.5)?;
            let j_initial = evaluate_policy(mdp, &th.policy())?.j;
            let (mut last, mut max_drop) = (j_initial, f64::NEG_INFINITY);
            for _ in 0..iterations {
                let out = safe_penalty_iteration(mdp, &th, &asg, 5, 1.0)?;
                max_drop = max_drop.max(last - out.j_new);
                last = out.j_new;
                th = out.logits;
            }
            runs.push(SpiRun {
                instance: name.clone(),
                shared,
                j_initial,
                j_final: last,
                max_drop,
            });
        }
    }
    Ok(SpiMonotonicity {
        runs,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// One of the two sums the condition compares.
#[derive(Clone, Debug, Serialize)]
pub struct SampledSum {
    pub exact: f64,
    pub estimates: Vec<f64>,
    /// Standard error of each estimate from its own samples.
    pub std_errors: Vec<f64>,
}

impl SampledSum {
    /// Fraction of resamples whose estimate lies within `k` standard errors.
    pub fn coverage(&self, k: f64) -> f64 {
        let hits = self
            .estimates
            .iter()
            .zip(&self.std_errors)
            .filter(|(e, s)| (*e - self.exact).abs() <= k * **s)
            .count();
        hits as f64 / self.estimates.len().max(1) as f64
    }

    /// Distance of the resample mean from the exact value in units of the
    /// spread of the estimates divided by `√resamples`.
    pub fn mean_z(&self) -> f64 {
        let r = self.estimates.len() as f64;
        let m = self.estimates.iter().sum::<f64>() / r;
        let sd = (self.estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
        (m - self.exact).abs() / (sd / r.sqrt())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionSampling {
    pub samples: usize,
    pub intermediate: SampledSum,
    pub old: SampledSum,
    pub seconds: f64,
}

/// Monte Carlo `Σ_i μ̂` on TwoGuard against the exact sums.
///
/// States are drawn from the normalized discounted visitation of the old
/// policy and actions from the old policy; estimates are rescaled by the
/// visitation mass `1/(1−γ)` to match the unnormalized measure.
pub fn measure_condition(samples: usize, resamples: usize, seed: u64) -> Result<ConditionSampling, ExperimentError> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = TabularMdp::two_guard();
    let n = mdp.n_agents();
    let nj = mdp.n_joint();
    let old = TabularJointPolicy::random(&mut rng, &mdp, 1.0);
    let inter = perturb(&old, &mdp, 0.4, &mut rng);
    let ev = evaluate_policy(&mdp, &old)?;
    let split = AdvantageSplit::random(&ev, n, &mut rng);
    let mut exact_inter = 0.0;
    let mut exact_old = 0.0;
    for i in 0..n {
        exact_inter += mu_exact(&mdp, &ev, &inter, &inter, i, &split)?;
        exact_old += mu_exact(&mdp, &ev, &inter, &old, i, &split)?;
    }
    let mass: f64 = ev.rho.iter().sum();
    let states = WeightedIndex::new(&ev.rho).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let rows: Vec<Vec<WeightedIndex<f64>>> = (0..n)
        .map(|i| (0..mdp.n_states()).map(|s| WeightedIndex::new(old.row(i, s)).expect("distribution")).collect())
        .collect();
    let mut intermediate = SampledSum {
        exact: exact_inter,
        estimates: vec![],
        std_errors: vec![],
    };
    let mut old_sum = SampledSum {
        exact: exact_old,
        estimates: vec![],
        std_errors: vec![],
    };
    for _ in 0..resamples {
        let mut old_lp = vec![Vec::with_capacity(samples); n];
        let mut new_lp = vec![Vec::with_capacity(samples); n];
        let mut adv = vec![Vec::with_capacity(samples); n];
        for _ in 0..samples {
            let s = states.sample(&mut rng);
            let a: Vec<usize> = (0..n).map(|i| rows[i][s].sample(&mut rng)).collect();
            let ja = mdp.encode(&a)?;
            for i in 0..n {
                old_lp[i].push(old.prob(i, s, a[i]).ln());
                new_lp[i].push(inter.prob(i, s, a[i]).ln());
                adv[i].push(split.agent(i)[s * nj + ja]);
            }
        }
        let per = mu_estimates(&old_lp, &new_lp, &adv);
        intermediate.estimates.push(mass * per.iter().map(|p| p.0).sum::<f64>());
        old_sum.estimates.push(mass * per.iter().map(|p| p.1).sum::<f64>());
        // per-sample terms, summed over agents, for the standard errors
        let (mut ti, mut to) = (Vec::with_capacity(samples), Vec::with_capacity(samples));
        for t in 0..samples {
            let joint: f64 = (0..n).map(|i| (new_lp[i][t] - old_lp[i][t]).exp()).product();
            ti.push(mass * joint * (0..n).map(|i| adv[i][t]).sum::<f64>());
            to.push(mass * (0..n).map(|i| (new_lp[i][t] - old_lp[i][t]).exp() * adv[i][t]).sum::<f64>());
        }
        intermediate.std_errors.push(std_error(&ti));
        old_sum.std_errors.push(std_error(&to));
    }
    Ok(ConditionSampling {
        samples,
        intermediate,
        old: old_sum,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

// ---------------------------------------------------------------------------
// gradients

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradientChecks {
    pub nets: usize,
    pub parameters: usize,
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_relative_error: f64,
    /// Largest gap between a shared slot's gradient and the sum of the
    /// matching per-agent gradients of an unshared copy.
    pub shared_sum_gap: f64,
    pub seconds: f64,
}

struct RandomNet {
    spec: MlpSpec,
    n_agents: usize,
    mode: SharingMode,
    inputs: Vec<Tensor>,
    /// Categorical targets or per-output weights, fixed per net.
    targets: Vec<usize>,
    weights: Tensor,
}

fn random_net(rng: &mut ChaCha8Rng) -> (RandomNet, ParamStore) {
    let input_dim = rng.random_range(1..=4);
    let hidden = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=5)).collect();
    let head = match rng.random_range(0..3) {
        0 => HeadKind::Categorical {
            actions: rng.random_range(2..=4),
        },
        1 => HeadKind::Gaussian {
            dim: rng.random_range(1..=2),
        },
        _ => HeadKind::Value,
    };
    let spec = MlpSpec::new(input_dim, hidden, head);
    let n_agents = rng.random_range(1..=3);
    let mode = [SharingMode::Full, SharingMode::Partial, SharingMode::None][rng.random_range(0..3)];
    let rows = 3;
    let normal = |k: usize, s: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..k).map(|_| s * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
    };
    let inputs = (0..n_agents)
        .map(|_| Tensor::new(vec![rows, input_dim], normal(rows * input_dim, 1.0, rng)).expect("shape"))
        .collect();
    let out = head.out_dim();
    let weights = Tensor::new(vec![rows, out], normal(rows * out, 1.0, rng)).expect("shape");
    let mut store = bind_sharing(&spec, n_agents, mode, rng.random()).expect("valid spec");
    for id in store.slot_ids().collect::<Vec<_>>() {
        let count = store.slot(id).expect("slot").tensors.len();
        for k in 0..count {
            let t = store.tensor_mut(id, k).expect("tensor");
            let v = normal(t.len(), 0.7, rng);
            t.data_mut().copy_from_slice(&v);
        }
    }
    let targets = (0..rows).map(|_| rng.random_range(0..out)).collect();
    (
        RandomNet {
            spec,
            n_agents,
            mode,
            inputs,
            targets,
            weights,
        },
        store,
    )
}

/// A scalar that touches every head output in a nonlinear way.
fn net_loss(g: &mut Graph, net: &RandomNet, store: &ParamStore) -> Result<Var, ExperimentError> {
    let mut total: Option<Var> = None;
    for a in 0..net.n_agents {
        let x = g.input(net.inputs[a].clone());
        let w = g.input(net.weights.clone());
        let term = match forward(g, store, &net.spec, a, x)? {
            HeadOut::Logits(l) => {
                let ls = g.log_softmax(l);
                let picked = g.gather(ls, net.targets.clone())?;
                let p = g.sum(picked);
                let wl = g.mul(l, w)?;
                let sq = g.square(wl);
                let m = g.mean(sq);
                g.sub(m, p)?
            }
            HeadOut::Gaussian { mean, log_std } => {
                let wm = g.mul(mean, w)?;
                let h = g.huber(wm, 0.3);
                let s = g.sum(h);
                let e = g.exp(log_std);
                let se = g.sum(e);
                g.add(s, se)?
            }
            HeadOut::Value(v) => {
                let wv = g.mul(v, w)?;
                let h = g.huber(wv, 0.5);
                let sq = g.square(v);
                let a = g.sum(h);
                let b = g.mean(sq);
                g.add(a, b)?
            }
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one agent"))
}

fn loss_value(net: &RandomNet, store: &ParamStore) -> Result<f64, ExperimentError> {
    let mut g = Graph::new();
    let l = net_loss(&mut g, net, store)?;
    Ok(g.value(l).item())
}

fn gradients(net: &RandomNet, store: &ParamStore) -> Result<Gradients, ExperimentError> {
    let mut g = Graph::new();
    let l = net_loss(&mut g, net, store)?;
    Ok(g.backward(l)?)
}

/// Same values as `store`, but with one slot per agent and layer.
fn unshared_copy(net: &RandomNet, store: &ParamStore) -> Result<ParamStore, ExperimentError> {
    let mut flat = bind_sharing(&net.spec, net.n_agents, SharingMode::None, 0)?;
    for a in 0..net.n_agents {
        for layer in 0..net.spec.layers() {
            let src = store.binding(a, layer)?;
            let dst = flat.binding(a, layer)?;
            let count = store.slot(src)?.tensors.len();
            for k in 0..count {
                *flat.tensor_mut(dst, k)? = store.tensor(src, k)?.clone();
            }
        }
    }
    Ok(flat)
}

/// Central finite differences on `nets` random networks in every sharing
/// mode, plus the shared-slot summation identity.
pub fn measure_gradients(nets: usize, seed: u64) -> Result<GradientChecks, ExperimentError> {
    const H: f64 = 1e-6;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradientChecks {
        nets,
        ..Default::default()
    };
    for _ in 0..nets {
        let (net, store) = random_net(&mut rng);
        let analytic = gradients(&net, &store)?;
        for id in store.slot_ids().collect::<Vec<_>>() {
            let count = store.slot(id)?.tensors.len();
            for k in 0..count {
                for e in 0..store.tensor(id, k)?.len() {
                    let mut plus = store.clone();
                    plus.tensor_mut(id, k)?.data_mut()[e] += H;
                    let mut minus = store.clone();
                    minus.tensor_mut(id, k)?.data_mut()[e] -= H;
                    let numeric = (loss_value(&net, &plus)? - loss_value(&net, &minus)?) / (2.0 * H);
                    let a = analytic.get(id).map_or(0.0, |ts| ts[k].data()[e]);
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                    out.max_relative_error = out.max_relative_error.max(err);
                    out.parameters += 1;
                }
            }
        }
        if net.mode != SharingMode::None {
            let flat = unshared_copy(&net, &store)?;
            let per_agent = gradients(&net, &flat)?;
            let mut summed: Vec<(SlotId, Vec<Tensor>)> = Vec::new();
            for ((a, layer), id) in store.bindings() {
                let src = per_agent.get(flat.binding(a, layer)?).expect("every slot is used");
                match summed.iter_mut().find(|(s, _)| *s == id) {
                    Some((_, acc)) => {
                        for (t, g) in acc.iter_mut().zip(src) {
                            *t = t.zip_map(g, |x, y| x + y);
                        }
                    }
                    None => summed.push((id, src.to_vec())),
                }
            }
            for (id, want) in summed {
                for (t, w) in analytic.get(id).expect("shared slot used").iter().zip(&want) {
                    for (x, y) in t.data().iter().zip(w.data()) {
                        out.shared_sum_gap = out.shared_sum_gap.max((x - y).abs());
                    }
                }
            }
        }
    }
    out.seconds = t0.elapsed().as_secs_f64();
    Ok(out)
}

// ---------------------------------------------------------------------------
// objectives, advantages and selection

#[derive(Clone, Debug, Default, Serialize)]
pub struct ObjectiveChecks {
    pub batches: usize,
    /// Normwise relative gap between the independent-step gradient and the
    /// clipped-surrogate gradient, worst batch.
    pub instep_vs_clip: f64,
    /// Largest `|objective|` at the collecting parameters.
    pub value_at_old: f64,
    /// Largest gap between λ = 1 advantages and Monte Carlo returns minus values.
    pub gae_vs_mc: f64,
    pub seconds: f64,
}

fn max_abs_diff(a: &Gradients, b: &Gradients) -> (f64, f64) {
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (slot, ts) in b.slots() {
        let other = a.get(slot);
        for (k, t) in ts.iter().enumerate() {
            for (e, y) in t.data().iter().enumerate() {
                let x = other.map_or(0.0, |o| o[k].data()[e]);
                diff = diff.max((x - y).abs());
                norm = norm.max(y.abs());
            }
        }
    }
    for (slot, ts) in a.slots() {
        if b.get(slot).is_none() {
            diff = ts.iter().flat_map(|t| t.data()).fold(diff, |m, x| m.max(x.abs()));
        }
    }
    (diff, norm)
}

/// Synthetic single-stream buffer with random rewards, values and episode cuts.
fn random_gae_buffer(rng: &mut ChaCha8Rng) -> RolloutBuffer {
    let workers = rng.random_range(1..=3);
    let horizon = rng.random_range(1..=12);
    let t = workers * horizon;
    RolloutBuffer {
        n_workers: workers,
        horizon,
        n_agents: 1,
        states: vec![vec![0.0]; t],
        obs: vec![vec![vec![0.0]; t]],
        actions: vec![vec![Action::Discrete(0); t]],
        rewards: (0..t).map(|_| rng.random_range(-1.0..1.0)).collect(),
        dones: (0..t).map(|_| rng.random_bool(0.25)).collect(),
        old_logp: vec![vec![0.0; t]],
        values: vec![(0..t).map(|_| rng.random_range(-2.0..2.0)).collect()],
        bootstrap: vec![(0..workers).map(|_| rng.random_range(-2.0..2.0)).collect()],
        returns: vec![],
        adv: vec![],
        adv_norm: vec![],
        adv_split: vec![],
        episode_returns: vec![],
    }
}

/// Discounted reward sums walked forward to the next episode end, or to the
/// end of the worker segment plus the discounted bootstrap.
fn monte_carlo(buf: &RolloutBuffer, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; buf.len()];
    for w in 0..buf.n_workers {
        for h in 0..buf.horizon {
            let (mut total, mut disc) = (0.0, 1.0);
            let mut k = h;
            loop {
                let t = w * buf.horizon + k;
                total += disc * buf.rewards[t];
                disc *= gamma;
                if buf.dones[t] {
                    break;
                }
                k += 1;
                if k == buf.horizon {
                    total += disc * buf.bootstrap[0][w];
                    break;
                }
            }
            out[w * buf.horizon + h] = total;
        }
    }
    out
}

pub fn measure_objectives(batches: usize, seed: u64) -> Result<ObjectiveChecks, ExperimentError> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ObjectiveChecks {
        batches,
        ..Default::default()
    };
    for b in 0..batches {
        let space = if b % 2 == 0 {
            ActionSpace::Discrete(rng.random_range(2..=5))
        } else {
            ActionSpace::Continuous(rng.random_range(1..=2))
        };
        let mode = [SharingMode::Full, SharingMode::Partial, SharingMode::None][b % 3];
        let n = rng.random_range(2..=3);
        let obs_dim = rng.random_range(1..=4);
        let ens = PolicyEnsemble::new(obs_dim, space, vec![8, 8], n, mode, rng.random())?;
        let rows = rng.random_range(4..=32);
        let agent = rng.random_range(0..n);
        let obs: Vec<Vec<f64>> = (0..rows).map(|_| (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut actions = Vec::with_capacity(rows);
        for o in &obs {
            actions.push(ens.act(agent, o, &mut rng)?.0);
        }
        let input = ens.agent_input(agent, &obs)?;
        let old_logp = ens.log_probs(agent, &input, &actions)?.0;
        let adv: Vec<f64> = (0..rows).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let ones = vec![1.0; rows];
        let eps = rng.random_range(0.05..0.3);

        let mut g = Graph::new();
        let (r, _) = live_ratio(&mut g, &ens, agent, &input, &actions, &old_logp)?;
        let l = fp3o_objective(&mut g, r, &ones, &ones, &adv, eps, None)?;
        out.value_at_old = out.value_at_old.max(g.value(l).item().abs());

        let mut moved = ens.clone();
        for id in moved.store.slot_ids().collect::<Vec<_>>() {
            let count = moved.store.slot(id)?.tensors.len();
            for k in 0..count {
                for v in moved.store.tensor_mut(id, k)?.data_mut() {
                    *v += 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
            }
        }
        let grad = |fp3o: bool| -> Result<Gradients, ExperimentError> {
            let mut g = Graph::new();
            let (r, _) = live_ratio(&mut g, &moved, agent, &input, &actions, &old_logp)?;
            let loss = if fp3o {
                fp3o_objective(&mut g, r, &ones, &ones, &adv, eps, None)?
            } else {
                let s = ppo_clip_surrogate(&mut g, r, &adv, eps)?;
                let m = g.mean(s);
                g.scale(m, -1.0)
            };
            Ok(g.backward(loss)?)
        };
        let (diff, norm) = max_abs_diff(&grad(true)?, &grad(false)?);
        if norm > 0.0 {
            out.instep_vs_clip = out.instep_vs_clip.max(diff / norm);
        } else if diff > 0.0 {
            out.instep_vs_clip = f64::INFINITY;
        }
    }
    for _ in 0..batches {
        let mut buf = random_gae_buffer(&mut rng);
        let gamma = rng.random_range(0.8..1.0);
        gae(&mut buf, gamma, 1.0);
        for (t, mc) in monte_carlo(&buf, gamma).into_iter().enumerate() {
            out.gae_vs_mc = out.gae_vs_mc.max((buf.adv[0][t] - (mc - buf.values[0][t])).abs());
            out.gae_vs_mc = out.gae_vs_mc.max((buf.returns[0][t] - mc).abs());
        }
    }
    out.seconds = t0.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectionChecks {
    /// `(n, shift)` pairs whose assignment is not a fixed-point-free permutation.
    pub failures: Vec<(usize, usize)>,
    pub checked: usize,
    /// The worked five-agent example, 1-based labels.
    pub example_in: Vec<usize>,
    pub example_out: Vec<usize>,
}

/// Every valid cyclic shift for 2..=`max_n` agents, judged by an independent
/// permutation check, plus the five-agent worked example.
pub fn measure_selection(max_n: usize) -> Result<SelectionChecks, ExperimentError> {
    let mut failures = Vec::new();
    let mut checked = 0;
    for n in 2..=max_n {
        for shift in 1..n {
            checked += 1;
            let a = nonoverlapping_selection(n, shift)?;
            let mut seen = vec![0usize; n];
            for &j in &a.j_order {
                if j < n {
                    seen[j] += 1;
                }
            }
            let bijective = seen.iter().all(|&c| c == 1) && a.i_order.len() == n;
            let fixed_point = a.i_order.iter().zip(&a.j_order).any(|(i, j)| i == j);
            if !bijective || fixed_point {
                failures.push((n, shift));
            }
        }
    }
    let example_in = vec![2, 4, 1, 3, 5];
    let a = nonoverlapping_selection_from(example_in.iter().map(|k| k - 1).collect(), 1)?;
    Ok(SelectionChecks {
        failures,
        checked,
        example_in,
        example_out: a.j_order.iter().map(|k| k + 1).collect(),
    })
}

// ---------------------------------------------------------------------------

/// Runs a suite at the default sizes and limits. Sizes match the acceptance
/// run so a fresh checkout reproduces it from the command line.
pub fn run_suite(suite: Suite) -> Result<Vec<Verdict>, ExperimentError> {
    use limits::*;
    let mut out = Vec::new();
    if matches!(suite, Suite::Oracle | Suite::All) {
        let o = measure_oracle_identities(200, 100, 1)?;
        let d = format!("{} MDPs in {:.1}s", o.mdps, o.seconds);
        out.push(below("oracle", "decomposition_residual", o.decomposition, IDENTITY, d.clone()));
        out.push(below("oracle", "two_term_residual", o.two_term, IDENTITY, d.clone()));
        out.push(below("oracle", "cross_pipeline_bound", o.cross_pipeline, IDENTITY, d.clone()));
        out.push(below("oracle", "importance_sampling_gap", o.importance_gap, IDENTITY, d));
        out.push(verdict(
            "oracle",
            "return_above_shared_bound",
            o.min_bound_slack,
            -IDENTITY,
            o.min_bound_slack >= -IDENTITY,
            format!("{} pairs", o.pairs),
        ));
        let s = measure_spi(20, 100, 2)?;
        let d = format!("{} runs in {:.1}s", s.runs.len(), s.seconds);
        out.push(below("oracle", "spi_max_drop", s.max_drop(), MONOTONE, d.clone()));
        let f = s.improved_fraction();
        out.push(verdict("oracle", "spi_improved_fraction", f, IMPROVED_FRACTION, f >= IMPROVED_FRACTION, d));
        let c = measure_condition(100_000, 50, 3)?;
        for (name, sum) in [("condition_intermediate", &c.intermediate), ("condition_old", &c.old)] {
            let cov = sum.coverage(SIGMAS);
            let z = sum.mean_z();
            out.push(verdict(
                "oracle",
                name,
                cov,
                COVERAGE,
                cov >= COVERAGE && z <= SIGMAS,
                format!("exact {:.6}, resample-mean z {:.2}", sum.exact, z),
            ));
        }
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        let g = measure_gradients(50, 4)?;
        let d = format!("{} nets, {} parameters", g.nets, g.parameters);
        out.push(below("gradients", "finite_differences", g.max_relative_error, FINITE_DIFF, d.clone()));
        out.push(below("gradients", "shared_slot_sum", g.shared_sum_gap, SHARED_SUM, d));
    }
    if matches!(suite, Suite::Schemes | Suite::All) {
        let o = measure_objectives(100, 5)?;
        out.push(below("schemes", "instep_equals_clip", o.instep_vs_clip, EQUIVALENCE, format!("{} batches", o.batches)));
        out.push(verdict("schemes", "zero_at_old", o.value_at_old, 0.0, o.value_at_old == 0.0, String::new()));
        out.push(below("schemes", "gae_lambda_one_is_mc", o.gae_vs_mc, EQUIVALENCE, String::new()));
        let s = measure_selection(8)?;
        out.push(verdict(
            "schemes",
            "selection_fixed_point_free",
            s.failures.len() as f64,
            0.0,
            s.failures.is_empty(),
            format!("{} assignments", s.checked),
        ));
        let ok = s.example_out == [4, 1, 3, 5, 2];
        out.push(verdict("schemes", "selection_example", ok as u8 as f64, 1.0, ok, format!("{:?}", s.example_out)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweeps_pass() {
        let o = measure_oracle_identities(10, 10, 0).unwrap();
        assert!(o.decomposition < 1e-10 && o.two_term < 1e-10 && o.cross_pipeline < 1e-10 && o.importance_gap < 1e-10);
        assert!(o.min_bound_slack >= -1e-10);
        let g = measure_gradients(5, 0).unwrap();
        assert!(g.max_relative_error < 1e-4, "{g:?}");
        assert!(g.shared_sum_gap < 1e-12);
        let ob = measure_objectives(6, 0).unwrap();
        assert!(ob.instep_vs_clip < 1e-10 && ob.value_at_old == 0.0 && ob.gae_vs_mc < 1e-10, "{ob:?}");
    }

    #[test]
    fn worked_selection_example() {
        let s = measure_selection(4).unwrap();
        assert_eq!(s.example_out, vec![4, 1, 3, 5, 2]);
        assert!(s.failures.is_empty());
        assert_eq!(s.checked, 1 + 2 + 3);
    }

    #[test]
    fn monte_carlo_oracle_on_a_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = random_gae_buffer(&mut rng);
        b.n_workers = 1;
        b.horizon = 3;
        b.rewards = vec![1.0, 2.0, 4.0];
        b.dones = vec![false, true, false];
        b.bootstrap = vec![vec![10.0]];
        assert_eq!(monte_carlo(&b, 0.5), vec![2.0, 2.0, 9.0]);
    }

    #[test]
    fn sampled_sum_statistics() {
        let s = SampledSum {
            exact: 1.0,
            estimates: vec![0.9, 1.1, 1.0, 1.4],
            std_errors: vec![0.1; 4],
        };
        assert_eq!(s.coverage(3.0), 0.75);
        assert!(s.mean_z() > 0.0);
    }

    #[test]
    fn permutations_are_complete() {
        let mut p = permutations(3);
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 6);
    }

    #[test]
    fn suite_names() {
        assert_eq!(Suite::parse("all"), Some(Suite::All));
        assert_eq!(Suite::parse("x"), None);
    }
}
