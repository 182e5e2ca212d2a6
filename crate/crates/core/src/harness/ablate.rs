//! Paradigm x seed sweeps summarised per paradigm.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algos::{MetricRecord, Paradigm};
use crate::envs::Registry;
use crate::error::{Error, Result};
use crate::exec::ExecMode;

use super::config::RunConfig;
use super::eval::mean_std;
use super::run::run_training;

pub const RUNS_CSV: &str = "ablation_runs.csv";
pub const SUMMARY_CSV: &str = "ablation_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub reward: f64,
    pub win_rate: Option<f64>,
    pub avg_node_information: f64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Stats {
        let (mean, std) = mean_std(xs);
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Stats { mean, std, min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub paradigm: Paradigm,
    pub runs: usize,
    pub reward: Stats,
    pub win_rate: Option<Stats>,
    pub avg_node_information: Stats,
}

/// Mean of the last tenth of the records (at least one), which smooths the
/// per-iteration noise of a single final row.
pub fn final_value(records: &[MetricRecord], f: impl Fn(&MetricRecord) -> f64) -> f64 {
    let tail = (records.len() / 10).max(1).min(records.len());
    let xs: Vec<f64> = records[records.len() - tail..].iter().map(f).collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn summarize(runs: &[AblationRun], paradigms: &[Paradigm]) -> Vec<AblationRow> {
    paradigms
        .iter()
        .map(|&p| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.paradigm == p).collect();
            let col = |f: &dyn Fn(&AblationRun) -> f64| -> Vec<f64> { mine.iter().map(|r| f(r)).collect() };
            let wins: Option<Vec<f64>> = mine.iter().map(|r| r.win_rate).collect();
            AblationRow {
                paradigm: p,
                runs: mine.len(),
                reward: Stats::of(&col(&|r| r.reward)),
                win_rate: wins.filter(|w| !w.is_empty()).map(|w| Stats::of(&w)),
                avg_node_information: Stats::of(&col(&|r| r.avg_node_information)),
            }
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn runs_csv(runs: &[AblationRun]) -> String {
    let mut s = String::from("paradigm,seed,reward,win_rate,avg_node_information\n");
    for r in runs {
        let _ = writeln!(s, "{},{},{},{},{}", r.paradigm, r.seed, r.reward, opt(r.win_rate), r.avg_node_information);
    }
    s
}

pub fn summary_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("paradigm,runs");
    for m in ["reward", "win_rate", "avg_node_information"] {
        for k in ["mean", "std", "min", "max"] {
            let _ = write!(s, ",{m}_{k}");
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.paradigm, r.runs);
        for st in [Some(r.reward), r.win_rate, Some(r.avg_node_information)] {
            for v in [st.map(|x| x.mean), st.map(|x| x.std), st.map(|x| x.min), st.map(|x| x.max)] {
                let _ = write!(s, ",{}", opt(v));
            }
        }
        s.push('\n');
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains every (paradigm, seed) pair from `base` into
/// `base.out_dir/<paradigm>_seed<seed>`, then writes the run list and the
/// per-paradigm summary next to them. Runs go one after another unless
/// `parallel` is set.
pub fn ablate(
    base: &RunConfig,
    paradigms: &[Paradigm],
    seeds: &[u64],
    registry: &Registry,
    parallel: bool,
) -> Result<(Vec<AblationRun>, Vec<AblationRow>)> {
    if paradigms.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one paradigm and one seed".into()));
    }
    let mut jobs = Vec::new();
    for &p in paradigms {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.algo.paradigm = p;
            cfg.algo.seed = seed;
            cfg.out_dir = base.out_dir.join(format!("{p}_seed{seed}"));
            jobs.push(cfg);
        }
    }
    let exec = if parallel { ExecMode::Parallel } else { ExecMode::Sequential };
    let results = exec.map(jobs, |cfg| -> Result<AblationRun> {
        let report = run_training(&cfg, registry)?;
        let recs = &report.records;
        let win = recs.last().and_then(|r| r.win_rate).map(|_| final_value(recs, |r| r.win_rate.unwrap_or(0.5)));
        Ok(AblationRun {
            paradigm: cfg.algo.paradigm,
            seed: cfg.algo.seed,
            reward: final_value(recs, |r| r.mean_episode_reward),
            win_rate: win,
            avg_node_information: final_value(recs, |r| r.avg_node_information),
            out_dir: cfg.out_dir.clone(),
        })
    });
    let runs: Vec<AblationRun> = results.into_iter().collect::<Result<_>>()?;
    let rows = summarize(&runs, paradigms);
    std::fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    write(&base.out_dir.join(RUNS_CSV), &runs_csv(&runs))?;
    write(&base.out_dir.join(SUMMARY_CSV), &summary_csv(&rows))?;
    Ok((runs, rows))
}
