//! Metric streams: `metrics.jsonl`, its flat `metrics.csv` mirror, and a
//! `timing.csv` sidecar for wall-clock seconds.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::algos::MetricRecord;
use crate::error::{Error, Result};

pub const JSONL: &str = "metrics.jsonl";
pub const CSV: &str = "metrics.csv";
pub const TIMING: &str = "timing.csv";

const CSV_HEADER: &str =
    "iteration,env_steps,mean_episode_reward,win_rate,avg_node_information,policy_loss,value_loss,entropy";

pub struct MetricsWriter {
    dir: PathBuf,
    jsonl: File,
    csv: File,
    timing: File,
    last: Option<(usize, u64)>,
}

fn open(path: &Path, fresh: bool) -> Result<File> {
    let mut o = OpenOptions::new();
    if fresh {
        o.write(true).create(true).truncate(true);
    } else {
        o.append(true).create(true);
    }
    o.open(path).map_err(|e| Error::io(path, e))
}

/// One csv row; an absent win rate is an empty field.
pub fn csv_row(r: &MetricRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.iteration,
        r.env_steps,
        r.mean_episode_reward,
        r.win_rate.map(|w| w.to_string()).unwrap_or_default(),
        r.avg_node_information,
        r.policy_loss,
        r.value_loss,
        r.entropy
    )
}

impl MetricsWriter {
    /// Creates (truncating) the three files in `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = MetricsWriter {
            dir: dir.to_path_buf(),
            jsonl: open(&dir.join(JSONL), true)?,
            csv: open(&dir.join(CSV), true)?,
            timing: open(&dir.join(TIMING), true)?,
            last: None,
        };
        w.write_line(CSV, |w| &mut w.csv, CSV_HEADER)?;
        w.write_line(TIMING, |w| &mut w.timing, "iteration,wall_clock_seconds")?;
        Ok(w)
    }

    fn write_line(&mut self, name: &str, file: impl Fn(&mut Self) -> &mut File, line: &str) -> Result<()> {
        let path = self.dir.join(name);
        let f = file(self);
        f.write_all(line.as_bytes()).and_then(|_| f.write_all(b"\n")).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
    }

    /// Appends one record to every stream and flushes.
    pub fn append(&mut self, r: &MetricRecord) -> Result<()> {
        if let Some((it, steps)) = self.last {
            if r.iteration <= it || r.env_steps < steps {
                return Err(Error::Input(format!("metric record {} does not follow {it}", r.iteration)));
            }
        }
        let json = serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?;
        self.write_line(JSONL, |w| &mut w.jsonl, &json)?;
        self.write_line(CSV, |w| &mut w.csv, &csv_row(r))?;
        self.write_line(TIMING, |w| &mut w.timing, &format!("{},{}", r.iteration, r.wall_clock_seconds))?;
        self.last = Some((r.iteration, r.env_steps));
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Input(format!("{}: {e}", path.display()))))
        .collect()
}
