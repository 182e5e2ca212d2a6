//! Files and protocols around training: run configs, checkpoints, metric
//! streams, evaluation, cross-play, ablation sweeps and group inspection.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod inspect;
pub mod metrics;
pub mod run;

pub use ablate::{ablate, AblationRow, AblationRun, Stats};
pub use checkpoint::{checkpoint_name, Checkpoint, FORMAT_VERSION};
pub use config::{parse_override, RunConfig, DEFAULT_ENV, KEYS};
pub use eval::{crossplay, evaluate, CrossplaySummary, EvalMode, EvalSetup, EvalSummary};
pub use inspect::{inspect_groups, InspectSummary};
pub use metrics::MetricsWriter;
pub use run::{run_training, TrainReport};
