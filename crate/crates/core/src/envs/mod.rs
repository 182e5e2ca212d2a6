//! Grid-world environments with one shared interface, plus a registry the
//! harness builds them from.

mod bandit;
mod battle;
mod buttons;
mod gather;
pub(crate) mod grid;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bandit::Bandit;
pub use battle::BattleLite;
pub use buttons::Buttons;
pub use gather::GatherLite;
pub use grid::{Action, OBS_RADIUS, WINDOW_CHANNELS};

/// Result of one joint step. `rewards[i]` is the reward of agent `i`'s team.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub alive: Vec<bool>,
}

/// Final state of a two-team episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Win(usize),
    Draw,
}

impl Outcome {
    /// Score for `team`: 1 win, 0.5 draw, 0 loss.
    pub fn score(self, team: usize) -> f64 {
        match self {
            Outcome::Win(t) if t == team => 1.0,
            Outcome::Win(_) => 0.0,
            Outcome::Draw => 0.5,
        }
    }
}

/// Line-delimited audit records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Step { t: usize, team_rewards: Vec<f64> },
    Press { t: usize, both: bool },
    FoodHit { t: usize, agent: usize, food: usize, remaining: u32 },
    FoodRemoved { t: usize, food: usize },
    Hit { t: usize, agent: usize, target: usize },
    Miss { t: usize, agent: usize },
    Death { t: usize, agent: usize },
}

pub trait MultiAgentEnv: Send + Sync {
    fn name(&self) -> &str;
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn episode_length(&self) -> usize;
    fn n_teams(&self) -> usize {
        1
    }
    fn team_of(&self, _agent: usize) -> usize {
        0
    }
    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>>;
    /// Actions of dead agents are ignored, but must still be in range.
    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;
    fn alive(&self) -> Vec<bool>;
    /// `Some` once a two-team episode has ended.
    fn outcome(&self) -> Option<Outcome> {
        None
    }
    fn set_event_log(&mut self, on: bool);
    fn events(&self) -> &[Event];
}

pub(crate) fn check_actions(actions: &[usize], n_agents: usize, n_actions: usize) -> Result<()> {
    if actions.len() != n_agents {
        return Err(Error::Input(format!("expected {n_agents} actions, got {}", actions.len())));
    }
    if let Some((i, a)) = actions.iter().enumerate().find(|(_, &a)| a >= n_actions) {
        return Err(Error::Input(format!("agent {i}: action {a} out of range 0..{n_actions}")));
    }
    Ok(())
}

/// Numeric overrides for one environment, keyed without the `env.` prefix.
pub type EnvSettings = BTreeMap<String, f64>;

pub type EnvBuilder = fn(&EnvSettings, usize) -> Result<Box<dyn MultiAgentEnv>>;

#[derive(Clone)]
pub struct EnvEntry {
    pub name: String,
    /// Every accepted key with its default.
    pub defaults: Vec<(&'static str, f64)>,
    pub build: EnvBuilder,
}

#[derive(Clone, Default)]
pub struct Registry {
    entries: BTreeMap<String, EnvEntry>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    pub fn builtin() -> Self {
        let mut r = Registry::empty();
        r.register("buttons_4", Buttons::defaults(), Buttons::build).unwrap();
        r.register("gather_lite_24", GatherLite::defaults(), GatherLite::build).unwrap();
        r.register("battle_lite_8v8", BattleLite::defaults(), BattleLite::build).unwrap();
        r.register("battle_lite_4v4", BattleLite::small_defaults(), BattleLite::build).unwrap();
        r.register("bandit_2", Bandit::defaults(), Bandit::build).unwrap();
        r
    }

    pub fn register(&mut self, name: &str, defaults: Vec<(&'static str, f64)>, build: EnvBuilder) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Registration(format!("environment `{name}` already registered")));
        }
        self.entries.insert(name.to_string(), EnvEntry { name: name.to_string(), defaults, build });
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&EnvEntry> {
        self.entries.get(name).ok_or_else(|| Error::Config(format!("unknown environment `{name}`")))
    }

    /// Defaults merged with `overrides`; unknown keys are rejected.
    pub fn settings(&self, name: &str, overrides: &EnvSettings) -> Result<EnvSettings> {
        let entry = self.get(name)?;
        let mut s: EnvSettings = entry.defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (k, v) in overrides {
            match s.get_mut(k) {
                Some(slot) => *slot = *v,
                None => return Err(Error::UnknownKey(format!("env.{k}"))),
            }
        }
        Ok(s)
    }

    pub fn build(&self, name: &str, overrides: &EnvSettings, episode_length: usize) -> Result<Box<dyn MultiAgentEnv>> {
        let settings = self.settings(name, overrides)?;
        if episode_length == 0 {
            return Err(Error::Config("episode_length must be positive".into()));
        }
        (self.get(name)?.build)(&settings, episode_length)
    }
}

pub(crate) fn setting_usize(s: &EnvSettings, key: &str, min: usize) -> Result<usize> {
    let v = s[key];
    if v.fract() != 0.0 || v < min as f64 {
        return Err(Error::Config(format!("env.{key} must be an integer >= {min}, got {v}")));
    }
    Ok(v as usize)
}
