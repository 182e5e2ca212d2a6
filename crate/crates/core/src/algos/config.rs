use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationMethod;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::grouping::LinkMode;
use crate::nets::{CriticHead, CriticInput, GatSpec, NetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Dtde,
    Ctde,
    Gtde,
    GtdeF,
    GtdeU,
    GtdeA,
}

impl Paradigm {
    pub const ALL: [Paradigm; 6] =
        [Paradigm::Dtde, Paradigm::Ctde, Paradigm::Gtde, Paradigm::GtdeF, Paradigm::GtdeU, Paradigm::GtdeA];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Dtde => "dtde",
            Paradigm::Ctde => "ctde",
            Paradigm::Gtde => "gtde",
            Paradigm::GtdeF => "gtde_f",
            Paradigm::GtdeU => "gtde_u",
            Paradigm::GtdeA => "gtde_a",
        }
    }

    /// Link source for the grouped family, `None` otherwise.
    pub fn link_mode(self) -> Option<LinkMode> {
        match self {
            Paradigm::Gtde => Some(LinkMode::Learned),
            Paradigm::GtdeF => Some(LinkMode::Fixed),
            Paradigm::GtdeU => Some(LinkMode::Uniform),
            Paradigm::GtdeA => Some(LinkMode::AllOnes),
            Paradigm::Dtde | Paradigm::Ctde => None,
        }
    }

    pub fn is_grouped(self) -> bool {
        self.link_mode().is_some()
    }

    pub fn critic_input(self) -> CriticInput {
        match self {
            Paradigm::Dtde => CriticInput::Individual,
            Paradigm::Ctde => CriticInput::Joint,
            _ => CriticInput::Grouped,
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown paradigm `{s}`")))
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ac,
    Ppo,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ac" => Ok(Algorithm::Ac),
            "ppo" => Ok(Algorithm::Ppo),
            _ => Err(Error::Config(format!("unknown algorithm `{s}`"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Ac => "ac",
            Algorithm::Ppo => "ppo",
        })
    }
}

/// What the matmul aggregation multiplies: encoder outputs or raw windows
/// (the latter are encoded after mixing).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateInput {
    Embedding,
    Raw,
}

impl std::str::FromStr for AggregateInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(AggregateInput::Embedding),
            "raw" => Ok(AggregateInput::Raw),
            _ => Err(Error::Config(format!("unknown aggregate_input `{s}`"))),
        }
    }
}

/// Tri-state switch: `auto` resolves from other settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    Auto,
    On,
    Off,
}

impl std::str::FromStr for Toggle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Toggle::Auto),
            "on" | "true" => Ok(Toggle::On),
            "off" | "false" => Ok(Toggle::Off),
            _ => Err(Error::Config(format!("expected auto, on or off, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Toggle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Toggle::Auto => "auto",
            Toggle::On => "on",
            Toggle::Off => "off",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmConfig {
    pub paradigm: Paradigm,
    pub algorithm: Algorithm,
    pub aggregation: AggregationMethod,
    pub aggregate_input: AggregateInput,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub ppo_epochs: usize,
    pub minibatches: usize,
    pub value_loss_coef: f64,
    pub entropy_coef: f64,
    pub temperature: f64,
    pub drop_prob: f64,
    pub drop_links: Toggle,
    /// Leaky slope on attention scores; 0 keeps the affine form.
    pub gat_score_slope: f64,
    pub history_len: usize,
    pub hidden: usize,
    pub heads: usize,
    pub gat_size: usize,
    pub episode_length: usize,
    pub rollout_threads: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: ExecMode,
}

fn is_competitive(env: &str) -> bool {
    env.starts_with("battle")
}

fn is_magent_like(env: &str) -> bool {
    env.starts_with("battle") || env.starts_with("gather")
}

impl ParadigmConfig {
    /// Defaults for `env`; battle and gather get their own discount, entropy
    /// and value weights, an actor-critic learner and matmul aggregation.
    pub fn defaults_for(env: &str) -> Self {
        let battle = is_competitive(env);
        let magent = is_magent_like(env);
        ParadigmConfig {
            paradigm: Paradigm::Gtde,
            algorithm: if magent { Algorithm::Ac } else { Algorithm::Ppo },
            aggregation: if magent { AggregationMethod::Matmul } else { AggregationMethod::Gat },
            aggregate_input: AggregateInput::Embedding,
            gamma: if battle { 0.95 } else { 0.99 },
            lambda: 0.95,
            clip: 0.2,
            lr: 1e-4,
            adam_eps: 1e-5,
            max_grad_norm: 10.0,
            ppo_epochs: 5,
            minibatches: 1,
            value_loss_coef: if battle { 0.1 } else { 1.0 },
            entropy_coef: if battle { 0.08 } else { 0.01 },
            temperature: 1.0,
            drop_prob: 0.1,
            drop_links: Toggle::Auto,
            gat_score_slope: 0.0,
            history_len: 4,
            hidden: 64,
            heads: 4,
            gat_size: 64,
            episode_length: 400,
            rollout_threads: 16,
            seed: 1,
            exec: ExecMode::default(),
        }
    }

    /// Whether the drop mask is applied while training.
    pub fn drop_active(&self) -> bool {
        self.paradigm.is_grouped()
            && self.drop_prob > 0.0
            && match self.drop_links {
                Toggle::On => true,
                Toggle::Off => false,
                Toggle::Auto => self.aggregation == AggregationMethod::Gat,
            }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]".into());
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.adam_eps > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("lr, adam_eps and max_grad_norm must be positive".into());
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return bad(format!("drop_prob must lie in [0, 1), got {}", self.drop_prob));
        }
        if self.gat_score_slope < 0.0 {
            return bad("gat_score_slope must be non-negative".into());
        }
        for (k, v) in [
            ("ppo_epochs", self.ppo_epochs),
            ("minibatches", self.minibatches),
            ("history_len", self.history_len),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("gat_size", self.gat_size),
            ("episode_length", self.episode_length),
            ("rollout_threads", self.rollout_threads),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.minibatches > self.rollout_threads {
            return bad("minibatches cannot exceed rollout_threads (episodes are split whole)".into());
        }
        if self.aggregate_input == AggregateInput::Raw && self.aggregation != AggregationMethod::Matmul {
            return bad("aggregate_input = raw requires matmul aggregation".into());
        }
        Ok(())
    }

    pub fn net_spec(&self, obs_dim: usize, n_actions: usize, n_agents: usize) -> NetSpec {
        let grouped = self.paradigm.is_grouped();
        NetSpec {
            obs_dim,
            history_len: self.history_len,
            hidden: self.hidden,
            n_actions,
            n_agents,
            critic_input: self.paradigm.critic_input(),
            critic_head: match self.algorithm {
                Algorithm::Ppo => CriticHead::Value,
                Algorithm::Ac => CriticHead::Q,
            },
            grouping_head: self.paradigm == Paradigm::Gtde,
            gat: (grouped && self.aggregation == AggregationMethod::Gat).then_some(GatSpec {
                heads: self.heads,
                head_dim: self.gat_size,
                score_slope: (self.gat_score_slope > 0.0).then_some(self.gat_score_slope),
            }),
        }
    }
}
