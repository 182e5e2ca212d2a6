//! Rollouts, advantage estimation and the paradigm trainers.

pub mod config;
pub mod critic;
pub mod losses;
pub mod optim;
pub mod rollout;
pub mod trainer;

pub use config::{AggregateInput, Algorithm, Paradigm, ParadigmConfig, Toggle};
pub use critic::{build_critic_input, LinkRecord};
pub use losses::{compute_gae, normalize_advantages, ppo_clip_term};
pub use optim::Adam;
pub use rollout::{policy_logits, Controllers, Episode, Worker};
pub use trainer::{train, Collected, MetricRecord, Trainer};
