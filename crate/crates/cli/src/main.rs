use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gtde_core::algos::Paradigm;
use gtde_core::envs::{EnvSettings, Registry};
use gtde_core::harness::{
    ablate, crossplay, evaluate, inspect_groups, parse_override, run_training, Checkpoint, EvalMode, EvalSetup,
    RunConfig, DEFAULT_ENV,
};
use gtde_core::{Error, ExecMode, Result};

#[derive(Parser)]
#[command(name = "gtde", version, about = "Grouped-training multi-agent RL: train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes metrics and checkpoints to out_dir.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value, applied after the file (last wins)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Decentralized evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's environment.
        #[arg(long)]
        env: Option<String>,
        /// env.<setting>=value overrides for the evaluation environment
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "greedy")]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write one JSON line per episode here.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Checkpoint A against checkpoint B in a two-team environment.
    Crossplay {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        env: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every paradigm x seed and summarise per paradigm.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "gtde,gtde_f,gtde_u,gtde_a")]
        paradigms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Run the sweep's trainings concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Export per-timestep groups and link frequencies of a grouped checkpoint.
    InspectGroups {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the documented default config for an environment.
    DumpDefaults {
        #[arg(long, default_value = DEFAULT_ENV)]
        env: String,
    },
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter().map(|s| parse_override(s)).collect()
}

fn load_config(path: Option<&Path>, set: &[String]) -> Result<RunConfig> {
    let ov = overrides(set)?;
    match path {
        Some(p) => RunConfig::load(p, &ov),
        None => RunConfig::from_pairs(&ov),
    }
}

/// `env.*` overrides only; eval and cross-play keep the checkpoint's training
/// settings otherwise.
fn env_settings(set: &[String]) -> Result<EnvSettings> {
    let mut out = EnvSettings::new();
    for (k, v) in overrides(set)? {
        let key = k.strip_prefix("env.").ok_or_else(|| Error::UnknownKey(k.clone()))?;
        let val = v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{k}`")))?;
        out.insert(key.to_string(), val);
    }
    Ok(out)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    let registry = Registry::builtin();
    match cli.command {
        Command::Train { config, set } => {
            let cfg = load_config(config.as_deref(), &set)?;
            cfg.validate(&registry)?;
            let report = ExecMode::with_threads(cfg.workers, || run_training(&cfg, &registry))?;
            if let Some(last) = report.records.last() {
                println!("{}", json(last));
            }
            println!("checkpoint: {}", report.final_checkpoint().display());
        }
        Command::Eval { checkpoint, env, set, episodes, mode, seed, records } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let params = ck.shared_params(&registry)?;
            let c = &ck.config;
            let env_name = env.unwrap_or_else(|| c.env.clone());
            let settings = if set.is_empty() && env_name == c.env { c.env_overrides.clone() } else { env_settings(&set)? };
            let setup = EvalSetup {
                registry: &registry,
                env: &env_name,
                overrides: &settings,
                episode_length: c.algo.episode_length,
                episodes: episodes.unwrap_or(c.eval_episodes),
                seed: seed.unwrap_or(c.algo.seed),
                exec: c.algo.exec,
            };
            let summary = evaluate(&params, &setup, mode.parse::<EvalMode>()?)?;
            if let Some(path) = records {
                let lines: String = summary.records.iter().map(|r| json(r) + "\n").collect();
                std::fs::write(&path, lines).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            }
            let mut brief = serde_json::to_value(&summary).unwrap_or_default();
            if let Some(o) = brief.as_object_mut() {
                o.remove("records");
            }
            println!("{brief}");
        }
        Command::Crossplay { a, b, env, set, episodes, seed } => {
            let (ca, cb) = (Checkpoint::load(&a)?, Checkpoint::load(&b)?);
            let (pa, pb) = (ca.shared_params(&registry)?, cb.shared_params(&registry)?);
            let c = &ca.config;
            let env_name = env.unwrap_or_else(|| c.env.clone());
            let settings = if set.is_empty() && env_name == c.env { c.env_overrides.clone() } else { env_settings(&set)? };
            let setup = EvalSetup {
                registry: &registry,
                env: &env_name,
                overrides: &settings,
                episode_length: c.algo.episode_length,
                episodes: episodes.unwrap_or(c.eval_episodes),
                seed: seed.unwrap_or(c.algo.seed),
                exec: c.algo.exec,
            };
            println!("{}", json(&crossplay(&pa, &pb, &setup)?));
        }
        Command::Ablate { config, set, paradigms, seeds, parallel } => {
            let cfg = load_config(config.as_deref(), &set)?;
            cfg.validate(&registry)?;
            let ps: Vec<Paradigm> = paradigms.iter().map(|p| p.parse()).collect::<Result<_>>()?;
            let (_, rows) = ExecMode::with_threads(cfg.workers, || ablate(&cfg, &ps, &seeds, &registry, parallel))?;
            for r in &rows {
                println!("{}", json(r));
            }
        }
        Command::InspectGroups { checkpoint, episodes, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            let s = inspect_groups(&ck, &registry, episodes, &dir)?;
            println!(
                "{}",
                serde_json::json!({
                    "env": s.env,
                    "episodes": s.episodes,
                    "timesteps": s.timesteps,
                    "avg_node_information": s.avg_node_information,
                    "output": dir,
                })
            );
        }
        Command::DumpDefaults { env } => print!("{}", RunConfig::dump_defaults(&env, &registry)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
