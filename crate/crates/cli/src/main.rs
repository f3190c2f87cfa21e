use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fp3o_core::envs::{EnvKind, EnvSpec};
use fp3o_core::experiment::plot::plot;
use fp3o_core::experiment::verify::{run_suite, Suite};
use fp3o_core::experiment::{evaluate_checkpoint, train, ExperimentError, RunConfig};
use fp3o_core::nn::SharingMode;
use fp3o_core::updaters::Algo;
use serde_json::json;

#[derive(Parser)]
#[command(name = "fp3o-lab", version, about = "Full-pipeline multi-agent PPO lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run and write metrics, a KL report and a checkpoint.
    Train {
        /// JSON run config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// fp3o, fp3o_instep_only, happo, mappo, ippo or coppo.
        #[arg(long)]
        algo: Option<String>,
        /// full, partial or none (also fups, paps, nops).
        #[arg(long)]
        sharing: Option<String>,
        /// matrix, spread or linereach.
        #[arg(long)]
        env: Option<String>,
        /// Environment step budget.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        /// Checkpoint directory or its manifest.json.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate on a different environment spec (JSON file).
        #[arg(long)]
        env_spec: Option<PathBuf>,
    },
    /// Run a verification suite; prints one JSON verdict per check.
    Verify {
        /// oracle, gradients, schemes or all.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Learning curves from metric files.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn bad(msg: String) -> ExperimentError {
    ExperimentError::Config(msg)
}

fn run(cli: Cli) -> Result<bool, ExperimentError> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            algo,
            sharing,
            env,
            steps,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => RunConfig::from_json(&fs::read_to_string(path)?)?,
                None => {
                    let kind = env.as_deref().map_or(Some(EnvKind::Matrix), EnvKind::parse);
                    RunConfig::for_env(kind.ok_or_else(|| bad(format!("unknown env {env:?}")))?)
                }
            };
            if let (Some(_), Some(e)) = (&config, &env) {
                let kind = EnvKind::parse(e).ok_or_else(|| bad(format!("unknown env {e}")))?;
                if kind != cfg.env.kind {
                    cfg.env = EnvSpec::default_for(kind);
                }
            }
            if let Some(a) = algo {
                cfg.update.algo = Algo::parse(&a).ok_or_else(|| bad(format!("unknown algo {a}")))?;
            }
            if let Some(m) = sharing {
                cfg.update.sharing = SharingMode::parse(&m).ok_or_else(|| bad(format!("unknown sharing mode {m}")))?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(k) = steps {
                cfg.num_env_steps = k;
            }
            cfg.output_dir = Some(out.clone());
            let summary = train(&cfg, &out)?;
            let last = summary.records.last().expect("initial record");
            println!(
                "{}",
                json!({
                    "iterations": last.iteration,
                    "env_steps": last.env_steps,
                    "final_eval": summary.final_eval(),
                    "metrics": summary.metrics,
                    "checkpoint": summary.checkpoint,
                })
            );
            Ok(true)
        }
        Cmd::Eval {
            checkpoint,
            episodes,
            seed,
            env_spec,
        } => {
            let spec: Option<EnvSpec> = match env_spec {
                Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
                None => None,
            };
            let stats = evaluate_checkpoint(&checkpoint, spec.as_ref(), episodes, seed)?;
            println!("{}", serde_json::to_string(&stats)?);
            Ok(true)
        }
        Cmd::Verify { suite } => {
            let s = Suite::parse(&suite).ok_or_else(|| bad(format!("unknown suite {suite}")))?;
            let verdicts = run_suite(s)?;
            for v in &verdicts {
                println!("{}", serde_json::to_string(v)?);
            }
            Ok(verdicts.iter().all(|v| v.passed))
        }
        Cmd::Plot { input, out } => {
            let summary = plot(&input, &out)?;
            if summary.skipped_lines > 0 {
                eprintln!("warning: skipped {} malformed lines", summary.skipped_lines);
            }
            println!(
                "{}",
                json!({
                    "files": summary.files,
                    "series": summary.series,
                    "skipped_lines": summary.skipped_lines,
                })
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
