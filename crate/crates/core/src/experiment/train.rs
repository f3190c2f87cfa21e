use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save;
use super::diagnostics::{kl_report, write_kl_csv};
use super::eval::evaluate;
use super::{ExperimentError, MetricRecord, RunConfig};
use crate::envs::Env;
use crate::policies::{CriticInput, CriticNet, PolicyEnsemble};
use crate::rollout::{gae, normalize_then_split, Collector};
use crate::updaters::{UpdateError, Updater};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const KL_FILE: &str = "kl_report.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const CONFIG_FILE: &str = "config.json";
const ABORT_DIR: &str = "checkpoint_abort";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<MetricRecord>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl TrainSummary {
    pub fn final_eval(&self) -> f64 {
        self.records.iter().rev().find_map(|r| r.eval_mean).unwrap_or(f64::NAN)
    }
}

/// Runs collect → GAE → normalize and split → update, evaluating greedily
/// on schedule, and writes `config.json`, `metrics.jsonl`, `kl_report.csv`
/// and `checkpoint/` under `out`.
///
/// Network, critic, collector, updater and split generators are seeded with
/// `seed`, `seed + 1`, ..., `seed + 4`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?)?;
    let seed = cfg.seed;
    let env = Env::new(&cfg.env)?;
    let n = env.n_agents();
    let mut ens = PolicyEnsemble::new(env.obs_dim(), env.action_space(), cfg.hidden_sizes.clone(), n, cfg.update.sharing, seed)?;
    let feat = match cfg.critic_input() {
        CriticInput::Global => env.state_dim(),
        CriticInput::Local => env.obs_dim(),
    };
    let mut critic = CriticNet::new(cfg.critic_input(), feat, n, cfg.hidden_sizes.clone(), seed + 1)?;
    let mut collector = Collector::new(&cfg.env, cfg.n_rollout_threads, seed + 2)?;
    let updater = Updater::new(cfg.update.clone(), n)?;
    let mut update_rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed + 4);
    let eval_seed = seed.wrapping_add(1_000_003);

    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut records = Vec::new();
    let mut emit = |rec: MetricRecord, records: &mut Vec<MetricRecord>| -> Result<(), ExperimentError> {
        serde_json::to_writer(&mut metrics, &rec)?;
        metrics.write_all(b"\n")?;
        records.push(rec);
        Ok(())
    };

    let first = evaluate(&ens, &cfg.env, cfg.eval_episodes, eval_seed)?;
    emit(MetricRecord::initial(first.mean, first.std), &mut records)?;

    let iterations = cfg.iterations();
    let mut env_steps = 0u64;
    for it in 1..=iterations {
        let mut buf = collector.collect(&ens, &critic, cfg.episode_length)?;
        env_steps += cfg.steps_per_iteration();
        gae(&mut buf, cfg.update.gamma, cfg.update.gae_lamda);
        normalize_then_split(&mut buf, cfg.update.split, &mut split_rng);
        let before = (ens.store.clone(), critic.store.clone());
        let report = match updater.iterate(&mut ens, &mut critic, &buf, &mut update_rng) {
            Ok(r) if [r.policy_loss, r.value_loss, r.entropy].iter().all(|x| x.is_finite()) => r,
            Ok(r) => {
                (ens.store, critic.store) = before;
                let reason = format!("non-finite loss (policy {}, value {})", r.policy_loss, r.value_loss);
                return Err(abort(cfg, out, it, env_steps, &ens, &critic, reason));
            }
            Err(e @ UpdateError::NonFinite(_)) => return Err(abort(cfg, out, it, env_steps, &ens, &critic, e.to_string())),
            Err(e) => return Err(e.into()),
        };
        let evaluated = if it % cfg.eval_interval == 0 || it == iterations {
            Some(evaluate(&ens, &cfg.env, cfg.eval_episodes, eval_seed)?)
        } else {
            None
        };
        let train_return = (!buf.episode_returns.is_empty())
            .then(|| buf.episode_returns.iter().sum::<f64>() / buf.episode_returns.len() as f64);
        emit(
            MetricRecord {
                iteration: it,
                env_steps,
                eval_mean: evaluated.map(|e| e.mean),
                eval_std: evaluated.map(|e| e.std),
                train_return,
                condition_met: report.condition.map(|c| c.met),
                constraint_met: report.constraint.map(|c| c.met),
                matching: report.matching(),
                dependent_step_ran: report.dependent_step_ran,
                kl: report.kl,
                policy_loss: Some(report.policy_loss),
                value_loss: Some(report.value_loss),
                entropy: Some(report.entropy),
            },
            &mut records,
        )?;
    }
    metrics.flush()?;
    write_kl_csv(&kl_report(&records), File::create(out.join(KL_FILE))?)?;
    let checkpoint = save(
        &out.join(CHECKPOINT_DIR),
        &cfg.env,
        cfg.update.algo,
        seed,
        iterations,
        env_steps,
        &cfg.hidden_sizes,
        &ens,
        &critic,
    )?;
    Ok(TrainSummary {
        records,
        checkpoint,
        metrics: metrics_path,
    })
}

fn abort(
    cfg: &RunConfig,
    out: &Path,
    iteration: usize,
    env_steps: u64,
    ens: &PolicyEnsemble,
    critic: &CriticNet,
    reason: String,
) -> ExperimentError {
    let dir = out.join(ABORT_DIR);
    match save(&dir, &cfg.env, cfg.update.algo, cfg.seed, iteration - 1, env_steps, &cfg.hidden_sizes, ens, critic) {
        Ok(path) => ExperimentError::Diverged {
            iteration,
            reason,
            checkpoint: path.display().to_string(),
        },
        Err(e) => e,
    }
}

/// Parses a metrics file, failing on the first malformed line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, ExperimentError> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
