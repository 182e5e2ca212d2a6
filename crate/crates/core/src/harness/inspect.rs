//! Group-structure export for grouped checkpoints: per-timestep memberships
//! (`groups_<episode>.jsonl`), link frequencies and the average group size.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algos::critic::sample_links;
use crate::algos::{Controllers, Worker};
use crate::envs::Registry;
use crate::error::{Error, Result};
use crate::grouping::{extract_groups, group_records, node_information_sums, write_group_records, GroupRecord};
use crate::numcore::Tape;

use super::checkpoint::Checkpoint;

pub const LINK_FREQUENCY_CSV: &str = "link_frequency.csv";
pub const SUMMARY_JSON: &str = "groups_summary.json";

pub fn groups_file(episode: usize) -> String {
    format!("groups_{episode}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectSummary {
    pub env: String,
    pub episodes: usize,
    pub timesteps: usize,
    pub avg_node_information: f64,
    /// Average group size over alive agents at each recorded timestep, in
    /// episode order.
    pub per_timestep: Vec<f64>,
    /// `link_frequency[i][j]`: share of timesteps with `j` in `g(v_i)`.
    pub link_frequency: Vec<Vec<f64>>,
    pub files: Vec<PathBuf>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Plays `episodes` sampled episodes with the checkpoint's policy and draws
/// the links the critic would see for them (no drop mask).
pub fn inspect_groups(ck: &Checkpoint, registry: &Registry, episodes: usize, out_dir: &Path) -> Result<InspectSummary> {
    let cfg = &ck.config;
    let algo = &cfg.algo;
    if !algo.paradigm.is_grouped() {
        return Err(Error::Protocol(format!("`{}` checkpoints have no grouping to inspect", algo.paradigm)));
    }
    if episodes == 0 {
        return Err(Error::Config("inspect-groups needs at least one episode".into()));
    }
    let params = ck.shared_params(registry)?;
    let n = params.spec().n_agents;
    let k = algo.history_len;
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut link_counts = vec![vec![0.0; n]; n];
    let mut per_timestep = Vec::new();
    let mut files = Vec::new();
    let (mut total, mut count, mut steps) = (0u64, 0u64, 0usize);
    for e in 0..episodes {
        let env = registry.build(&cfg.env, &cfg.env_overrides, algo.episode_length)?;
        let mut w = Worker::new(e, env, algo.seed, k);
        let ep = w.run_episode(&Controllers::shared(&params), false)?;
        let mut tape = Tape::inference();
        let bound = params.bind(&mut tape, false);
        let windows = tape.constant(ep.windows(k)?);
        let emb = params.encode(&mut tape, &bound, windows)?;
        let a = sample_links(&mut tape, algo, &params, &bound, emb, ck.fixed_links.as_ref(), false, &mut w.rng)?;
        let groups = extract_groups(&a);
        let masks = ep.alive_masks();
        let mut records: Vec<GroupRecord> = Vec::new();
        for (t, (g, m)) in groups.iter().zip(&masks).enumerate() {
            records.extend(group_records(e, t, g));
            let (s, c) = node_information_sums(std::slice::from_ref(g), std::slice::from_ref(m))?;
            if c > 0 {
                per_timestep.push(s as f64 / c as f64);
            }
            total += s;
            count += c;
            for (i, row) in link_counts.iter_mut().enumerate() {
                for &j in g.group(i) {
                    row[j] += 1.0;
                }
            }
        }
        steps += groups.len();
        let path = out_dir.join(groups_file(e));
        let f = File::create(&path).map_err(io(&path))?;
        write_group_records(BufWriter::new(f), &records).map_err(io(&path))?;
        files.push(path);
    }
    let link_frequency: Vec<Vec<f64>> =
        link_counts.into_iter().map(|row| row.into_iter().map(|c| c / steps as f64).collect()).collect();
    let mut csv = String::new();
    for row in &link_frequency {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    let freq_path = out_dir.join(LINK_FREQUENCY_CSV);
    std::fs::write(&freq_path, csv).map_err(io(&freq_path))?;
    files.push(freq_path);
    let summary = InspectSummary {
        env: cfg.env.clone(),
        episodes,
        timesteps: steps,
        avg_node_information: if count == 0 { f64::NAN } else { total as f64 / count as f64 },
        per_timestep,
        link_frequency,
        files,
    };
    let json_path = out_dir.join(SUMMARY_JSON);
    let body = serde_json::to_string_pretty(&summary).map_err(|e| Error::Input(e.to_string()))?;
    std::fs::write(&json_path, body).map_err(io(&json_path))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::Trainer;
    use crate::harness::config::RunConfig;
    use crate::numcore::Tensor;

    fn checkpoint(env: &str, paradigm: &str) -> (Checkpoint, Trainer) {
        let mut c = RunConfig::defaults(env);
        for (k, v) in [("paradigm", paradigm), ("episode_length", "8"), ("rollout_threads", "1"), ("hidden", "8"), ("gat_size", "4")] {
            c.set(k, v).unwrap();
        }
        let t = Trainer::new(c.algo.clone(), &Registry::builtin(), env, &c.env_overrides, Path::new(".")).unwrap();
        (Checkpoint::capture(&t, &c), t)
    }

    #[test]
    fn saturated_negative_logits_give_singletons() {
        let (_, mut t) = checkpoint("buttons_4", "gtde");
        let i = t.params().grouping_bias_index().unwrap();
        t.params_mut().set(i, Tensor::full(1, 4, -1e3)).unwrap();
        let mut c = RunConfig::defaults("buttons_4");
        for (k, v) in [("episode_length", "8"), ("rollout_threads", "1"), ("hidden", "8"), ("gat_size", "4")] {
            c.set(k, v).unwrap();
        }
        let ck = Checkpoint::capture(&t, &c);
        let dir = tempfile::tempdir().unwrap();
        let s = inspect_groups(&ck, &Registry::builtin(), 2, dir.path()).unwrap();
        assert_eq!(s.avg_node_information, 1.0);
        for (i, row) in s.link_frequency.iter().enumerate() {
            for (j, &f) in row.iter().enumerate() {
                assert_eq!(f, if i == j { 1.0 } else { 0.0 });
            }
        }
        let text = std::fs::read_to_string(dir.path().join(groups_file(1))).unwrap();
        for line in text.lines() {
            let r: GroupRecord = serde_json::from_str(line).unwrap();
            assert_eq!(r.members, vec![r.agent]);
        }
    }

    #[test]
    fn per_timestep_bounds_with_deaths() {
        let (ck, _) = checkpoint("battle_lite_4v4", "gtde_u");
        let dir = tempfile::tempdir().unwrap();
        let s = inspect_groups(&ck, &Registry::builtin(), 3, dir.path()).unwrap();
        assert_eq!(s.timesteps, s.per_timestep.len());
        for &v in &s.per_timestep {
            assert!((1.0..=8.0).contains(&v), "{v}");
        }
        for i in 0..8 {
            assert_eq!(s.link_frequency[i][i], 1.0);
        }
    }

    #[test]
    fn ungrouped_checkpoints_refused() {
        let (ck, _) = checkpoint("buttons_4", "dtde");
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(inspect_groups(&ck, &Registry::builtin(), 1, dir.path()), Err(Error::Protocol(_))));
    }
}
