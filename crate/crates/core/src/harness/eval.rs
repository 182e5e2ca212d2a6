//! Decentralized evaluation and cross-play. Only the policy head runs here;
//! no link is ever sampled.

use serde::{Deserialize, Serialize};

use crate::algos::{Controllers, Worker};
use crate::envs::{EnvSettings, MultiAgentEnv, Registry};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::grouping::adjacency_constructions;
use crate::nets::SharedParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Greedy,
    Sample,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(EvalMode::Greedy),
            "sample" => Ok(EvalMode::Sample),
            _ => Err(Error::Config(format!("eval mode must be greedy or sample, got `{s}`"))),
        }
    }
}

/// Where and how long to play.
#[derive(Clone)]
pub struct EvalSetup<'a> {
    pub registry: &'a Registry,
    pub env: &'a str,
    pub overrides: &'a EnvSettings,
    pub episode_length: usize,
    pub episodes: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub steps: usize,
    /// Mean over teams of the team return.
    pub reward: f64,
    /// Team 0's score (1 win, 0.5 draw, 0 loss) in two-team environments.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub env: String,
    pub mode: EvalMode,
    pub episodes: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub win_rate: Option<f64>,
    pub win_rate_std: Option<f64>,
    /// Execution forms no groups, so there is nothing to average.
    pub avg_node_information: Option<f64>,
    /// Adjacency matrices built while evaluating; always 0.
    pub adjacency_constructions: u64,
    pub records: Vec<EpisodeRecord>,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_compatible(env: &dyn MultiAgentEnv, policies: &[&SharedParams]) -> Result<usize> {
    let k = policies[0].spec().history_len;
    for p in policies {
        let s = p.spec();
        if s.obs_dim != env.obs_dim() || s.n_actions != env.n_actions() {
            return Err(Error::Compatibility(format!(
                "policy expects {} observation features and {} actions, environment `{}` has {} and {}",
                s.obs_dim,
                s.n_actions,
                env.name(),
                env.obs_dim(),
                env.n_actions()
            )));
        }
        if s.history_len != k {
            return Err(Error::Compatibility("policies use different history lengths".into()));
        }
    }
    Ok(k)
}

/// Plays `setup.episodes` episodes. Episode `e` runs on worker stream
/// `stream(e)`, so results do not depend on the execution mode.
fn play(
    setup: &EvalSetup<'_>,
    policies: &[&SharedParams],
    team_policy: impl Fn(usize) -> Vec<usize> + Sync,
    stream: impl Fn(usize) -> usize + Sync,
    greedy: bool,
) -> Result<(Vec<EpisodeRecord>, u64)> {
    let probe = setup.registry.build(setup.env, setup.overrides, setup.episode_length)?;
    let k = check_compatible(probe.as_ref(), policies)?;
    let results = setup.exec.map((0..setup.episodes).collect(), |e| -> Result<(EpisodeRecord, u64)> {
        // the counter is per thread, so measure on the thread doing the work
        let before = adjacency_constructions();
        let env = setup.registry.build(setup.env, setup.overrides, setup.episode_length)?;
        let mut w = Worker::new(stream(e), env, setup.seed, k);
        let ctl = Controllers { policies: policies.to_vec(), team_policy: team_policy(e) };
        let ep = w.run_episode(&ctl, greedy)?;
        let reward = ep.team_returns.iter().sum::<f64>() / ep.team_returns.len() as f64;
        let score = (ep.team_returns.len() == 2).then(|| ep.outcome.map_or(0.5, |o| o.score(0)));
        let built = adjacency_constructions() - before;
        Ok((EpisodeRecord { episode: e, steps: ep.steps, reward, score }, built))
    });
    let mut records = Vec::with_capacity(setup.episodes);
    let mut built = 0;
    for r in results {
        let (rec, b) = r?;
        records.push(rec);
        built += b;
    }
    Ok((records, built))
}

/// Runs one shared policy for every agent.
pub fn evaluate(params: &SharedParams, setup: &EvalSetup<'_>, mode: EvalMode) -> Result<EvalSummary> {
    if setup.episodes == 0 {
        return Err(Error::Config("eval needs at least one episode".into()));
    }
    let (records, built) = play(setup, &[params], |_| Vec::new(), |e| e, mode == EvalMode::Greedy)?;
    let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
    let (mean_reward, std_reward) = mean_std(&rewards);
    let scores: Option<Vec<f64>> = records.iter().map(|r| r.score).collect();
    let (win_rate, win_rate_std) = match scores {
        Some(s) => {
            let (m, sd) = mean_std(&s);
            (Some(m), Some(sd))
        }
        None => (None, None),
    };
    Ok(EvalSummary {
        env: setup.env.to_string(),
        mode,
        episodes: records.len(),
        mean_reward,
        std_reward,
        win_rate,
        win_rate_std,
        avg_node_information: None,
        adjacency_constructions: built,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossplaySummary {
    pub env: String,
    pub episodes: usize,
    /// Side A's mean score, draws counted as 0.5.
    pub win_rate_a: f64,
    pub wins_a: usize,
    pub draws: usize,
    pub losses_a: usize,
    pub adjacency_constructions: u64,
}

/// Policy A against policy B with sampled actions. Episodes come in pairs on
/// the same start state and random stream, with A on team 0 in the first and
/// on team 1 in the second, so spawn-side effects cancel and
/// `crossplay(A, B) + crossplay(B, A) = 1` for an even episode count.
pub fn crossplay(a: &SharedParams, b: &SharedParams, setup: &EvalSetup<'_>) -> Result<CrossplaySummary> {
    let probe = setup.registry.build(setup.env, setup.overrides, setup.episode_length)?;
    if probe.n_teams() != 2 {
        return Err(Error::Protocol(format!(
            "cross-play needs a two-team environment, `{}` has {} team(s)",
            setup.env,
            probe.n_teams()
        )));
    }
    if setup.episodes == 0 {
        return Err(Error::Config("cross-play needs at least one episode".into()));
    }
    // policies[0] is A; team_policy maps team -> policy
    let sides = |e: usize| if e % 2 == 0 { vec![0, 1] } else { vec![1, 0] };
    let (records, built) = play(setup, &[a, b], sides, |e| e / 2, false)?;
    let (mut wins, mut draws, mut losses, mut total) = (0, 0, 0, 0.0);
    for r in &records {
        let team0 = r.score.expect("two teams");
        let s = if r.episode % 2 == 0 { team0 } else { 1.0 - team0 };
        total += s;
        match s {
            s if s == 1.0 => wins += 1,
            s if s == 0.0 => losses += 1,
            _ => draws += 1,
        }
    }
    Ok(CrossplaySummary {
        env: setup.env.to_string(),
        episodes: records.len(),
        win_rate_a: total / records.len() as f64,
        wins_a: wins,
        draws,
        losses_a: losses,
        adjacency_constructions: built,
    })
}
