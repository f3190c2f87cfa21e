use rand::SeedableRng;

use super::*;
use crate::envs::{Env, EnvKind, EnvSpec};
use crate::nn::SharingMode;
use crate::policies::{CriticInput, CriticNet, PolicyEnsemble};
use crate::rollout::{gae, normalize_then_split, Collector, SplitKind};

struct Fixture {
    ens: PolicyEnsemble,
    critic: CriticNet,
    buf: RolloutBuffer,
}

fn fixture(kind: EnvKind, mode: SharingMode, critic_input: CriticInput, seed: u64) -> Fixture {
    let spec = EnvSpec::default_for(kind);
    let env = Env::new(&spec).unwrap();
    let ens = PolicyEnsemble::new(env.obs_dim(), env.action_space(), vec![16], env.n_agents(), mode, seed).unwrap();
    let feat = match critic_input {
        CriticInput::Global => env.state_dim(),
        CriticInput::Local => env.obs_dim(),
    };
    let critic = CriticNet::new(critic_input, feat, env.n_agents(), vec![16], seed + 1).unwrap();
    let mut col = Collector::new(&spec, 2, seed).unwrap();
    let mut buf = col.collect(&ens, &critic, 40).unwrap();
    gae(&mut buf, 0.99, 0.95);
    normalize_then_split(&mut buf, SplitKind::Average, &mut ChaCha8Rng::seed_from_u64(seed));
    Fixture { ens, critic, buf }
}

fn cfg(algo: Algo, mode: SharingMode) -> UpdateConfig {
    UpdateConfig {
        algo,
        sharing: mode,
        ppo_epochs: 2,
        num_mini_batch: 2,
        actor_lr: 5e-3,
        ..Default::default()
    }
}

fn run(algo: Algo, mode: SharingMode, f: &mut Fixture, c: UpdateConfig) -> IterationReport {
    let up = Updater::new(c, f.ens.n_agents()).unwrap();
    up.iterate(&mut f.ens, &mut f.critic, &f.buf, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap_or_else(|e| panic!("{algo:?}/{mode:?}: {e}"))
}

#[test]
fn zero_lr_is_identity() {
    for algo in Algo::ALL {
        let mut f = fixture(EnvKind::Matrix, SharingMode::Full, CriticInput::Global, 1);
        let before = f.ens.store.clone();
        let c = UpdateConfig {
            actor_lr: 0.0,
            ..cfg(algo, SharingMode::Full)
        };
        let r = run(algo, SharingMode::Full, &mut f, c);
        assert!(f.ens.store.same_values(&before), "{algo:?}");
        assert!(r.kl.iter().all(|k| k.mean == 0.0 && k.max == 0.0));
        if algo == Algo::Fp3o {
            let c = r.condition.unwrap();
            assert!(c.met && c.sum_mu_intermediate == c.sum_mu_old);
            assert_eq!(r.matching(), Some(true));
        }
        for t in &r.kl_turns {
            assert!(t.kl.iter().all(|k| k.mean == 0.0));
        }
    }
}

#[test]
fn every_scheme_runs_in_every_mode() {
    for mode in [SharingMode::Full, SharingMode::Partial, SharingMode::None] {
        for kind in [EnvKind::Matrix, EnvKind::Linereach] {
            for algo in Algo::ALL {
                if algo == Algo::Coppo && mode != SharingMode::Full {
                    assert!(matches!(
                        Updater::new(cfg(algo, mode), 2),
                        Err(UpdateError::Unsupported(_))
                    ));
                    continue;
                }
                let input = if algo == Algo::Ippo { CriticInput::Local } else { CriticInput::Global };
                let mut f = fixture(kind, mode, input, 2);
                let before = f.ens.store.clone();
                let r = run(algo, mode, &mut f, cfg(algo, mode));
                assert!(!f.ens.store.same_values(&before));
                assert!(r.kl.iter().all(|k| k.mean >= 0.0 && k.max >= k.mean - 1e-12));
                assert!(r.value_loss.is_finite() && r.policy_loss.is_finite());
            }
        }
    }
}

#[test]
fn fp3o_trains_each_agent_once_per_step() {
    let mut f = fixture(EnvKind::Spread, SharingMode::None, CriticInput::Global, 4);
    let r = run(Algo::Fp3o, SharingMode::None, &mut f, cfg(Algo::Fp3o, SharingMode::None));
    let n = f.ens.n_agents();
    for phase in [Phase::Independent, Phase::Dependent] {
        let agents: Vec<usize> = r.trace.iter().filter(|e| e.phase == phase).map(|e| e.agent).collect();
        if phase == Phase::Dependent && !r.dependent_step_ran {
            assert!(agents.is_empty());
            continue;
        }
        let mut sorted = agents.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
    let dep: Vec<_> = r.trace.iter().filter(|e| e.phase == Phase::Dependent).collect();
    for e in dep {
        let p = e.pipeline.unwrap();
        assert_ne!(e.agent, r.trace[p].agent, "pipeline {p} trained its own opener");
    }
}

#[test]
fn two_agent_pipelines_cross() {
    let a = Updater::new(cfg(Algo::Fp3o, SharingMode::None), 2).unwrap();
    let asg = a.assignment().unwrap();
    assert_eq!(asg.i_order, vec![0, 1]);
    assert_eq!(asg.j_order, vec![1, 0]);
}

#[test]
fn iteration_is_deterministic() {
    for algo in [Algo::Fp3o, Algo::Happo, Algo::Coppo] {
        let mut a = fixture(EnvKind::Matrix, SharingMode::Full, CriticInput::Global, 5);
        let mut b = fixture(EnvKind::Matrix, SharingMode::Full, CriticInput::Global, 5);
        let ra = run(algo, SharingMode::Full, &mut a, cfg(algo, SharingMode::Full));
        let rb = run(algo, SharingMode::Full, &mut b, cfg(algo, SharingMode::Full));
        assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
        assert_eq!(a.ens.store, b.ens.store);
    }
}

#[test]
fn happo_first_factor_and_turn_kl() {
    let mut f = fixture(EnvKind::Matrix, SharingMode::None, CriticInput::Global, 6);
    let r = run(Algo::Happo, SharingMode::None, &mut f, cfg(Algo::Happo, SharingMode::None));
    assert_eq!(r.kl_turns.len(), 2);
    let first = r.kl_turns[0].agent;
    let second = r.kl_turns[1].agent;
    // with separate parameters only the agent that moved has drifted
    assert!(r.kl_turns[0].kl[first].mean > 0.0);
    assert_eq!(r.kl_turns[0].kl[second].mean, 0.0);
}

#[test]
fn instep_gradient_equals_ppo_clip() {
    let f = fixture(EnvKind::Matrix, SharingMode::Partial, CriticInput::Global, 7);
    let mut moved = f.ens.clone();
    // move away from the collecting parameters so ratios differ from 1
    for id in moved.store.slot_ids().collect::<Vec<_>>() {
        for k in 0..2 {
            for (j, v) in moved.store.tensor_mut(id, k).unwrap().data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((j * 7 + k) as f64).sin();
            }
        }
    }
    let inputs = f.buf.agent_inputs(&moved).unwrap();
    let i = 1;
    let adv = &f.buf.adv_split[i];
    let ones = vec![1.0; f.buf.len()];
    let grad = |fp3o: bool| {
        let mut g = Graph::new();
        let (r, _) = live_ratio(&mut g, &moved, i, &inputs[i], &f.buf.actions[i], &f.buf.old_logp[i]).unwrap();
        let loss = if fp3o {
            fp3o_objective(&mut g, r, &ones, &ones, adv, 0.2, None).unwrap()
        } else {
            let s = ppo_clip_surrogate(&mut g, r, adv, 0.2).unwrap();
            let m = g.mean(s);
            g.scale(m, -1.0)
        };
        g.backward(loss).unwrap()
    };
    let (a, b) = (grad(true), grad(false));
    for (slot, ts) in a.slots() {
        for (x, y) in ts.iter().zip(b.get(slot).unwrap()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()));
            }
        }
    }
}

#[test]
fn shared_slots_receive_summed_pipeline_gradients() {
    let f = fixture(EnvKind::Matrix, SharingMode::Full, CriticInput::Global, 8);
    let inputs = f.buf.agent_inputs(&f.ens).unwrap();
    let ones = vec![1.0; f.buf.len()];
    let pipeline_loss = |g: &mut Graph, i: usize| {
        let (r, _) = live_ratio(g, &f.ens, i, &inputs[i], &f.buf.actions[i], &f.buf.old_logp[i]).unwrap();
        fp3o_objective(g, r, &ones, &ones, &f.buf.adv_split[i], 0.2, None).unwrap()
    };
    let mut g = Graph::new();
    let l0 = pipeline_loss(&mut g, 0);
    let l1 = pipeline_loss(&mut g, 1);
    let sum = g.add(l0, l1).unwrap();
    let joint = g.backward(sum).unwrap();
    let mut separate = {
        let mut g = Graph::new();
        let l = pipeline_loss(&mut g, 0);
        g.backward(l).unwrap()
    };
    let mut g = Graph::new();
    let l = pipeline_loss(&mut g, 1);
    separate.accumulate(&g.backward(l).unwrap());
    for (slot, ts) in joint.slots() {
        for (x, y) in ts.iter().zip(separate.get(slot).unwrap()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn objective_is_zero_at_old_parameters() {
    let f = fixture(EnvKind::Spread, SharingMode::Full, CriticInput::Global, 9);
    let inputs = f.buf.agent_inputs(&f.ens).unwrap();
    for i in 0..3 {
        let mut g = Graph::new();
        let (r, _) = live_ratio(&mut g, &f.ens, i, &inputs[i], &f.buf.actions[i], &f.buf.old_logp[i]).unwrap();
        assert!(g.value(r).data().iter().all(|&x| x == 1.0));
        let ones = vec![1.0; f.buf.len()];
        let l = fp3o_objective(&mut g, r, &ones, &ones, &f.buf.adv_split[i], 0.2, None).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}

#[test]
fn unprocessed_buffer_is_rejected() {
    let mut f = fixture(EnvKind::Matrix, SharingMode::Full, CriticInput::Global, 10);
    f.buf.adv_split.clear();
    let up = Updater::new(cfg(Algo::Fp3o, SharingMode::Full), 2).unwrap();
    let before = f.ens.store.clone();
    assert!(up.iterate(&mut f.ens, &mut f.critic, &f.buf, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(f.ens.store.same_values(&before));
}
