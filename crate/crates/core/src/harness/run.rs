//! A full training run on disk: config echo, metric streams, checkpoints.

use std::path::PathBuf;

use crate::algos::{MetricRecord, Trainer};
use crate::envs::Registry;
use crate::error::{Error, Result};

use super::checkpoint::{checkpoint_name, Checkpoint};
use super::config::RunConfig;
use super::metrics::MetricsWriter;

pub const CONFIG_ECHO: &str = "config.cfg";

pub struct TrainReport {
    pub records: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub trainer: Trainer,
}

impl TrainReport {
    pub fn final_checkpoint(&self) -> &PathBuf {
        self.checkpoints.last().expect("a run always ends with a checkpoint")
    }
}

/// Trains `cfg.iterations` iterations into `cfg.out_dir`. The metric files are
/// recreated; each row is flushed as soon as it is written.
pub fn run_training(cfg: &RunConfig, registry: &Registry) -> Result<TrainReport> {
    cfg.validate(registry)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = dir.join(CONFIG_ECHO);
    std::fs::write(&echo, cfg.to_text(true)).map_err(|e| Error::io(&echo, e))?;
    let mut metrics = MetricsWriter::create(dir)?;
    let mut trainer = Trainer::new(cfg.algo.clone(), registry, &cfg.env, &cfg.env_overrides, dir)?;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let total = cfg.iterations;
    trainer.train(total, |rec, t| {
        let it = rec.iteration;
        if it % cfg.metrics_every == 0 || it == total {
            metrics.append(rec)?;
        }
        records.push(rec.clone());
        if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) || it == total {
            let path = dir.join(checkpoint_name(it));
            Checkpoint::capture(t, cfg).save(&path)?;
            checkpoints.push(path);
        }
        Ok(())
    })?;
    if checkpoints.is_empty() {
        let path = dir.join(checkpoint_name(trainer.iteration()));
        Checkpoint::capture(&trainer, cfg).save(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainReport { records, checkpoints, trainer })
}
