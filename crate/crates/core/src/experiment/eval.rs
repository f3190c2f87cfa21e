use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{check_compatible, load};
use super::ExperimentError;
use crate::envs::{Env, EnvSpec};
use crate::policies::{Action, PolicyEnsemble};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
    pub episodes: usize,
}

impl EvalStats {
    pub fn from_returns(returns: &[f64]) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            episodes: returns.len(),
        }
    }
}

/// Plays `episodes` full episodes with every agent taking its greedy action.
pub fn evaluate(ens: &PolicyEnsemble, spec: &EnvSpec, episodes: usize, seed: u64) -> Result<EvalStats, ExperimentError> {
    check_compatible(ens, &Env::new(spec)?)?;
    let r = episode_returns(spec, episodes, seed, |agent, obs| Ok(ens.act_greedy(agent, obs)?))?;
    Ok(EvalStats::from_returns(&r))
}

/// Episode returns of an arbitrary per-agent action rule.
pub fn episode_returns(
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(usize, &[f64]) -> Result<Action, ExperimentError>,
) -> Result<Vec<f64>, ExperimentError> {
    if episodes == 0 {
        return Err(ExperimentError::Config("evaluation needs at least one episode".into()));
    }
    let mut env = Env::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut step = env.reset(&mut rng);
        let mut total = 0.0;
        while !step.done {
            let actions = step
                .obs
                .iter()
                .enumerate()
                .map(|(i, o)| policy(i, o))
                .collect::<Result<Vec<_>, _>>()?;
            step = env.step(&actions, &mut rng)?;
            total += step.reward;
        }
        out.push(total);
    }
    Ok(out)
}

/// Loads a checkpoint and evaluates it on its own environment, or on `env`
/// when given.
pub fn evaluate_checkpoint(path: &Path, env: Option<&EnvSpec>, episodes: usize, seed: u64) -> Result<EvalStats, ExperimentError> {
    let loaded = load(path)?;
    let spec = env.unwrap_or(&loaded.manifest.env);
    evaluate(&loaded.ens, spec, episodes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{optimal_return, EnvKind};
    use crate::nn::SharingMode;
    use rand::Rng;

    #[test]
    fn scripted_optimum_on_matrix() {
        let spec = EnvSpec::default_for(EnvKind::Matrix);
        let r = episode_returns(&spec, 5, 0, |_, _| Ok(Action::Discrete(0))).unwrap();
        let opt = optimal_return(&spec).unwrap();
        assert!(r.iter().all(|&x| x == opt));
    }

    #[test]
    fn uniform_policy_matches_payoff_mean() {
        let spec = EnvSpec::default_for(EnvKind::Matrix);
        let payoff = spec.payoff.clone().unwrap();
        let mean_step = payoff.iter().sum::<f64>() / payoff.len() as f64;
        let var_step = payoff.iter().map(|p| (p - mean_step).powi(2)).sum::<f64>() / payoff.len() as f64;
        let len = spec.episode_length as f64;
        let (want, sd) = (mean_step * len, (var_step * len).sqrt());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = episode_returns(&spec, 1000, 0, |_, _| Ok(Action::Discrete(rng.random_range(0..3)))).unwrap();
        let got = EvalStats::from_returns(&r).mean;
        assert!((got - want).abs() < 3.0 * sd / 1000f64.sqrt(), "{got} vs {want}");
    }

    #[test]
    fn zero_episodes_rejected_and_greedy_is_deterministic() {
        let spec = EnvSpec::default_for(EnvKind::Spread);
        let env = Env::new(&spec).unwrap();
        let ens = PolicyEnsemble::new(env.obs_dim(), env.action_space(), vec![8], 3, SharingMode::None, 2).unwrap();
        assert!(evaluate(&ens, &spec, 0, 0).is_err());
        let a = evaluate(&ens, &spec, 4, 0).unwrap();
        assert_eq!(a, evaluate(&ens, &spec, 4, 1).unwrap());
        assert_eq!(a.std, 0.0);
        assert!(evaluate(&ens, &EnvSpec::default_for(EnvKind::Matrix), 4, 0).is_err());
    }
}
