//! Run checkpoints: `manifest.json` next to one raw file per parameter slot.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::envs::{ActionSpace, Env, EnvSpec};
use crate::nn::checkpoint::{read_slots, write_slots, SlotRecord};
use crate::nn::{MlpSpec, SharingMode};
use crate::policies::{CriticInput, CriticNet, PolicyEnsemble};
use crate::updaters::Algo;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub env: EnvSpec,
    pub algo: Algo,
    pub mode: SharingMode,
    pub seed: u64,
    pub iteration: usize,
    pub env_steps: u64,
    pub hidden_sizes: Vec<usize>,
    pub actor_spec: MlpSpec,
    pub actor_slots: Vec<SlotRecord>,
    pub critic_input: CriticInput,
    pub critic_spec: MlpSpec,
    pub critic_slots: Vec<SlotRecord>,
}

pub struct Loaded {
    pub manifest: Manifest,
    pub ens: PolicyEnsemble,
    pub critic: CriticNet,
}

#[allow(clippy::too_many_arguments)]
pub fn save(
    dir: &Path,
    env: &EnvSpec,
    algo: Algo,
    seed: u64,
    iteration: usize,
    env_steps: u64,
    hidden_sizes: &[usize],
    ens: &PolicyEnsemble,
    critic: &CriticNet,
) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        env: env.clone(),
        algo,
        mode: ens.mode(),
        seed,
        iteration,
        env_steps,
        hidden_sizes: hidden_sizes.to_vec(),
        actor_spec: ens.spec().clone(),
        actor_slots: write_slots(dir, "actor", &ens.store)?,
        critic_input: critic.input_kind(),
        critic_spec: critic.spec().clone(),
        critic_slots: write_slots(dir, "critic", &critic.store)?,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Accepts the checkpoint directory or its manifest file.
pub fn load(path: &Path) -> Result<Loaded, ExperimentError> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&file)?)?;
    let env = Env::new(&manifest.env)?;
    let mut ens = PolicyEnsemble::new(
        env.obs_dim(),
        env.action_space(),
        manifest.hidden_sizes.clone(),
        env.n_agents(),
        manifest.mode,
        manifest.seed,
    )?;
    if ens.spec() != &manifest.actor_spec {
        return Err(ExperimentError::Mismatch("actor network does not fit the environment".into()));
    }
    read_slots(&dir, &manifest.actor_slots, &mut ens.store)?;
    let feat = match manifest.critic_input {
        CriticInput::Global => env.state_dim(),
        CriticInput::Local => env.obs_dim(),
    };
    let mut critic = CriticNet::new(manifest.critic_input, feat, env.n_agents(), manifest.hidden_sizes.clone(), manifest.seed + 1)?;
    if critic.spec() != &manifest.critic_spec {
        return Err(ExperimentError::Mismatch("critic network does not fit the environment".into()));
    }
    read_slots(&dir, &manifest.critic_slots, &mut critic.store)?;
    Ok(Loaded { manifest, ens, critic })
}

/// Checks that a policy trained on one environment can act in another.
pub fn check_compatible(ens: &PolicyEnsemble, env: &Env) -> Result<(), ExperimentError> {
    let space_ok = match (env.action_space(), &ens.spec().head) {
        (ActionSpace::Discrete(a), crate::nn::HeadKind::Categorical { actions }) => a == *actions,
        (ActionSpace::Continuous(d), crate::nn::HeadKind::Gaussian { dim }) => d == *dim,
        _ => false,
    };
    if env.n_agents() != ens.n_agents() || env.obs_dim() != ens.obs_dim() || !space_ok {
        return Err(ExperimentError::Mismatch(format!(
            "policy for {} agents, obs {}, head {:?}; environment has {} agents, obs {}, {:?}",
            ens.n_agents(),
            ens.obs_dim(),
            ens.spec().head,
            env.n_agents(),
            env.obs_dim(),
            env.action_space()
        )));
    }
    Ok(())
}
