use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{RolloutBuffer, RolloutError};
use crate::envs::{Env, EnvSpec, StepResult};
use crate::policies::{Action, CriticInput, CriticNet, PolicyEnsemble};

struct Worker {
    env: Env,
    rng: ChaCha8Rng,
    last: StepResult,
    episode_return: f64,
}

#[derive(Default)]
struct Segment {
    states: Vec<Vec<f64>>,
    obs: Vec<Vec<Vec<f64>>>,
    actions: Vec<Vec<Action>>,
    logp: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    episode_returns: Vec<f64>,
    /// State and observations after the last step, if that step did not end the episode.
    tail: Option<(Vec<f64>, Vec<Vec<f64>>)>,
}

/// Persistent parallel environments. Episodes carry over between calls.
pub struct Collector {
    workers: Vec<Worker>,
    pool: Option<rayon::ThreadPool>,
}

impl Collector {
    /// Worker `w` draws from stream `w + 1` of a ChaCha8 generator seeded with `seed`.
    ///
    /// `FP3O_LAB_THREADS`, when set, caps the worker thread count.
    pub fn new(spec: &EnvSpec, n_workers: usize, seed: u64) -> Result<Self, RolloutError> {
        if n_workers == 0 {
            return Err(RolloutError::Invalid("no workers".into()));
        }
        let workers = (0..n_workers)
            .map(|w| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(w as u64 + 1);
                let mut env = Env::new(spec).map_err(|source| RolloutError::Env { worker: w, source })?;
                let last = env.reset(&mut rng);
                Ok(Worker {
                    env,
                    rng,
                    last,
                    episode_return: 0.0,
                })
            })
            .collect::<Result<Vec<_>, RolloutError>>()?;
        let pool = match std::env::var("FP3O_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(n) if n > 0 => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| RolloutError::Invalid(e.to_string()))?,
            ),
            _ => None,
        };
        Ok(Self { workers, pool })
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    /// Runs every worker for `horizon` steps under `ens`, then scores all
    /// visited states with `critic`.
    pub fn collect(&mut self, ens: &PolicyEnsemble, critic: &CriticNet, horizon: usize) -> Result<RolloutBuffer, RolloutError> {
        if horizon == 0 {
            return Err(RolloutError::Invalid("zero horizon".into()));
        }
        let n = ens.n_agents();
        let run = |workers: &mut Vec<Worker>| -> Vec<Result<Segment, RolloutError>> {
            workers
                .par_iter_mut()
                .enumerate()
                .map(|(w, wk)| run_worker(wk, w, ens, horizon))
                .collect()
        };
        let segments = match &self.pool {
            Some(p) => p.install(|| run(&mut self.workers)),
            None => run(&mut self.workers),
        };

        let mut buf = RolloutBuffer {
            n_workers: self.workers.len(),
            horizon,
            n_agents: n,
            states: vec![],
            obs: vec![vec![]; n],
            actions: vec![vec![]; n],
            rewards: vec![],
            dones: vec![],
            old_logp: vec![vec![]; n],
            values: vec![],
            bootstrap: vec![],
            returns: vec![],
            adv: vec![],
            adv_norm: vec![],
            adv_split: vec![],
            episode_returns: vec![],
        };
        let mut tails = Vec::with_capacity(self.workers.len());
        for seg in segments {
            let seg = seg?;
            buf.states.extend(seg.states);
            for i in 0..n {
                buf.obs[i].extend(seg.obs[i].iter().cloned());
                buf.actions[i].extend(seg.actions[i].iter().cloned());
                buf.old_logp[i].extend_from_slice(&seg.logp[i]);
            }
            buf.rewards.extend(seg.rewards);
            buf.dones.extend(seg.dones);
            buf.episode_returns.extend(seg.episode_returns);
            tails.push(seg.tail);
        }

        let inputs = buf.critic_inputs(critic)?;
        buf.values = inputs.iter().map(|x| critic.values(x)).collect::<Result<_, _>>()?;
        buf.bootstrap = (0..critic.streams())
            .map(|s| {
                tails
                    .iter()
                    .map(|tail| match tail {
                        None => Ok(0.0),
                        Some((state, obs)) => {
                            let feat = match critic.input_kind() {
                                CriticInput::Global => state,
                                CriticInput::Local => &obs[s],
                            };
                            Ok(critic.values(&critic.stream_input(s, &[feat])?)?[0])
                        }
                    })
                    .collect::<Result<Vec<_>, RolloutError>>()
            })
            .collect::<Result<_, _>>()?;
        Ok(buf)
    }
}

fn run_worker(wk: &mut Worker, w: usize, ens: &PolicyEnsemble, horizon: usize) -> Result<Segment, RolloutError> {
    let n = ens.n_agents();
    let mut seg = Segment {
        obs: vec![Vec::with_capacity(horizon); n],
        actions: vec![Vec::with_capacity(horizon); n],
        logp: vec![Vec::with_capacity(horizon); n],
        ..Segment::default()
    };
    for _ in 0..horizon {
        let mut joint = Vec::with_capacity(n);
        for i in 0..n {
            let (a, lp) = ens.act(i, &wk.last.obs[i], &mut wk.rng)?;
            seg.logp[i].push(lp);
            joint.push(a);
        }
        let next = wk
            .env
            .step(&joint, &mut wk.rng)
            .map_err(|source| RolloutError::Env { worker: w, source })?;
        seg.states.push(std::mem::take(&mut wk.last.state));
        for (i, a) in joint.into_iter().enumerate() {
            seg.obs[i].push(std::mem::take(&mut wk.last.obs[i]));
            seg.actions[i].push(a);
        }
        seg.rewards.push(next.reward);
        seg.dones.push(next.done);
        wk.episode_return += next.reward;
        if next.done {
            seg.episode_returns.push(wk.episode_return);
            wk.episode_return = 0.0;
            wk.last = wk.env.reset(&mut wk.rng);
        } else {
            wk.last = next;
        }
    }
    seg.tail = if *seg.dones.last().unwrap_or(&true) {
        None
    } else {
        Some((wk.last.state.clone(), wk.last.obs.clone()))
    };
    Ok(seg)
}
