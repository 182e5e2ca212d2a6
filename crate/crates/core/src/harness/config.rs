//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::algos::ParadigmConfig;
use crate::envs::{EnvSettings, Registry};
use crate::error::{Error, Result};
use crate::exec::ExecMode;

pub const DEFAULT_ENV: &str = "buttons_4";

/// Every recognised key with its one-line description, in output order.
/// `env.<setting>` keys are checked against the environment registry.
pub const KEYS: &[(&str, &str)] = &[
    ("env", "registered environment name; picks the environment-dependent defaults"),
    ("paradigm", "dtde | ctde | gtde | gtde_f | gtde_u | gtde_a"),
    ("algorithm", "ac | ppo"),
    ("aggregation", "matmul | gat"),
    ("aggregate_input", "embedding | raw (raw needs matmul)"),
    ("gamma", "discount"),
    ("lambda", "GAE lambda"),
    ("clip", "PPO clip epsilon"),
    ("lr", "Adam learning rate"),
    ("adam_eps", "Adam epsilon"),
    ("max_grad_norm", "global gradient norm clip"),
    ("ppo_epochs", "passes over each batch (ppo only)"),
    ("minibatches", "episode-wise minibatches per epoch (ppo only)"),
    ("value_loss_coef", "critic loss weight"),
    ("entropy_coef", "entropy bonus weight"),
    ("temperature", "Gumbel-Sigmoid temperature"),
    ("drop_prob", "probability of dropping an off-diagonal link while training"),
    ("drop_links", "auto | on | off (auto: on for gat, off for matmul)"),
    ("gat_score_slope", "leaky slope on attention scores, 0 = affine scores"),
    ("history_len", "observations per history window"),
    ("hidden", "encoder and head width"),
    ("heads", "attention heads"),
    ("gat_size", "per-head attention width"),
    ("episode_length", "step cap per episode"),
    ("rollout_threads", "environments rolled out per iteration"),
    ("seed", "master seed"),
    ("exec", "parallel | sequential"),
    ("iterations", "training iterations"),
    ("out_dir", "directory for metrics, checkpoints and exports"),
    ("workers", "thread pool size, 0 = one per core"),
    ("metrics_every", "write a metric row every k iterations (the last one is always written)"),
    ("checkpoint_every", "save a checkpoint every k iterations, 0 = only at the end"),
    ("eval_episodes", "episodes per eval or crossplay run"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: String,
    pub algo: ParadigmConfig,
    pub env_overrides: EnvSettings,
    pub iterations: usize,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub metrics_every: usize,
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
}

/// `key = value` pairs in file order. `#` starts a comment anywhere on a line.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// One `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg.split_once('=').ok_or_else(|| Error::Config(format!("override `{arg}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl RunConfig {
    pub fn defaults(env: &str) -> Self {
        RunConfig {
            env: env.to_string(),
            algo: ParadigmConfig::defaults_for(env),
            env_overrides: EnvSettings::new(),
            iterations: if env.starts_with("battle") {
                2000
            } else if env.starts_with("gather") {
                1200
            } else {
                200
            },
            out_dir: PathBuf::from("runs"),
            workers: 0,
            metrics_every: 1,
            checkpoint_every: 50,
            eval_episodes: 200,
        }
    }

    /// Builds from pairs applied in order, so later pairs win. The `env` key
    /// is read first because it decides the defaults the others override.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let env = pairs.iter().rev().find(|(k, _)| k == "env").map_or(DEFAULT_ENV, |(_, v)| v.as_str());
        let mut cfg = RunConfig::defaults(env);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let a = &mut self.algo;
        match key {
            "env" => self.env = v.to_string(),
            "paradigm" => a.paradigm = v.parse()?,
            "algorithm" => a.algorithm = v.parse()?,
            "aggregation" => a.aggregation = v.parse()?,
            "aggregate_input" => a.aggregate_input = v.parse()?,
            "gamma" => a.gamma = value(key, v)?,
            "lambda" => a.lambda = value(key, v)?,
            "clip" => a.clip = value(key, v)?,
            "lr" => a.lr = value(key, v)?,
            "adam_eps" => a.adam_eps = value(key, v)?,
            "max_grad_norm" => a.max_grad_norm = value(key, v)?,
            "ppo_epochs" => a.ppo_epochs = value(key, v)?,
            "minibatches" => a.minibatches = value(key, v)?,
            "value_loss_coef" => a.value_loss_coef = value(key, v)?,
            "entropy_coef" => a.entropy_coef = value(key, v)?,
            "temperature" => a.temperature = value(key, v)?,
            "drop_prob" => a.drop_prob = value(key, v)?,
            "drop_links" => a.drop_links = v.parse()?,
            "gat_score_slope" => a.gat_score_slope = value(key, v)?,
            "history_len" => a.history_len = value(key, v)?,
            "hidden" => a.hidden = value(key, v)?,
            "heads" => a.heads = value(key, v)?,
            "gat_size" => a.gat_size = value(key, v)?,
            "episode_length" => a.episode_length = value(key, v)?,
            "rollout_threads" => a.rollout_threads = value(key, v)?,
            "seed" => a.seed = value(key, v)?,
            "exec" => {
                a.exec = match v {
                    "parallel" => ExecMode::Parallel,
                    "sequential" => ExecMode::Sequential,
                    _ => return Err(Error::Config(format!("bad value `{v}` for `exec`"))),
                }
            }
            "iterations" => self.iterations = value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "workers" => self.workers = value(key, v)?,
            "metrics_every" => self.metrics_every = value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = value(key, v)?,
            "eval_episodes" => self.eval_episodes = value(key, v)?,
            other => match other.strip_prefix("env.") {
                Some(setting) if !setting.is_empty() => {
                    self.env_overrides.insert(setting.to_string(), value(key, v)?);
                }
                _ => return Err(Error::UnknownKey(other.to_string())),
            },
        }
        Ok(())
    }

    /// Value of `key` as it would be written to a file.
    pub fn get(&self, key: &str) -> Option<String> {
        let a = &self.algo;
        Some(match key {
            "env" => self.env.clone(),
            "paradigm" => a.paradigm.to_string(),
            "algorithm" => a.algorithm.to_string(),
            "aggregation" => a.aggregation.to_string(),
            "aggregate_input" => match a.aggregate_input {
                crate::algos::AggregateInput::Embedding => "embedding".into(),
                crate::algos::AggregateInput::Raw => "raw".into(),
            },
            "gamma" => a.gamma.to_string(),
            "lambda" => a.lambda.to_string(),
            "clip" => a.clip.to_string(),
            "lr" => a.lr.to_string(),
            "adam_eps" => a.adam_eps.to_string(),
            "max_grad_norm" => a.max_grad_norm.to_string(),
            "ppo_epochs" => a.ppo_epochs.to_string(),
            "minibatches" => a.minibatches.to_string(),
            "value_loss_coef" => a.value_loss_coef.to_string(),
            "entropy_coef" => a.entropy_coef.to_string(),
            "temperature" => a.temperature.to_string(),
            "drop_prob" => a.drop_prob.to_string(),
            "drop_links" => a.drop_links.to_string(),
            "gat_score_slope" => a.gat_score_slope.to_string(),
            "history_len" => a.history_len.to_string(),
            "hidden" => a.hidden.to_string(),
            "heads" => a.heads.to_string(),
            "gat_size" => a.gat_size.to_string(),
            "episode_length" => a.episode_length.to_string(),
            "rollout_threads" => a.rollout_threads.to_string(),
            "seed" => a.seed.to_string(),
            "exec" => if a.exec.is_parallel() { "parallel" } else { "sequential" }.into(),
            "iterations" => self.iterations.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "workers" => self.workers.to_string(),
            "metrics_every" => self.metrics_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            other => return other.strip_prefix("env.").and_then(|s| self.env_overrides.get(s)).map(f64::to_string),
        })
    }

    /// Checks the values and the `env.*` keys against `registry`.
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        registry.settings(&self.env, &self.env_overrides)?;
        self.algo.validate()?;
        if self.metrics_every == 0 {
            return Err(Error::Config("metrics_every must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form. With `comments`, each key is preceded by its
    /// description.
    pub fn to_text(&self, comments: bool) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            if comments {
                out.push_str(&format!("# {doc}\n"));
            }
            out.push_str(&format!("{k} = {}\n", self.get(k).unwrap_or_default()));
        }
        for (k, v) in &self.env_overrides {
            out.push_str(&format!("env.{k} = {v}\n"));
        }
        out
    }

    /// The defaults for `env` with every environment setting spelled out.
    pub fn dump_defaults(env: &str, registry: &Registry) -> Result<String> {
        let mut cfg = RunConfig::defaults(env);
        cfg.env_overrides = registry.settings(env, &EnvSettings::new())?;
        let mut text = format!("# defaults for {env}\n");
        text.push_str(&cfg.to_text(true));
        Ok(text)
    }
}
