//! Grouped training with decentralized execution (GTDE) for multi-agent
//! reinforcement learning, together with the DTDE and CTDE baselines and the
//! fixed/uniform/all-links grouping ablations.

pub mod aggregate;
pub mod algos;
pub mod envs;
pub mod error;
pub mod exec;
pub mod grouping;
pub mod harness;
pub mod numcore;
pub mod nets;
pub mod reparam;

pub use error::{Error, Result};
pub use exec::ExecMode;
