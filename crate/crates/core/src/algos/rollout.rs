//! Decentralized acting: each agent's action depends only on its own history
//! window. Workers own an environment and a private generator.

use crate::envs::{MultiAgentEnv, Outcome};
use crate::error::Result;
use crate::nets::{categorical, HistoryWindow, SharedParams};
use crate::numcore::{Tape, Tensor};
use crate::reparam::Rng;

/// Policy logits for a batch of windows (one row per agent). Rows are
/// computed independently, so an agent's logits never see another's window.
pub fn policy_logits(params: &SharedParams, windows: &[&HistoryWindow]) -> Result<Tensor> {
    let width = params.spec().input_dim();
    let mut flat = Vec::with_capacity(windows.len() * width);
    for w in windows {
        w.flatten_into(&mut flat);
    }
    let mut tape = Tape::inference().with_finite_checks(false);
    let b = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::new(windows.len(), flat.len() / windows.len().max(1), flat)?);
    let e = params.encode(&mut tape, &b, x)?;
    let l = params.policy_logits(&mut tape, &b, e)?;
    Ok(tape.value(l).clone())
}

/// One finished episode as seen by a worker. Per-agent arrays are laid out
/// `t * n + i`.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n: usize,
    pub obs_dim: usize,
    pub steps: usize,
    /// Observation before acting at `t`, `steps · n · obs_dim`.
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Alive when acting.
    pub alive: Vec<bool>,
    /// Episode over, or the agent died, after step `t`.
    pub dones: Vec<bool>,
    pub team_returns: Vec<f64>,
    pub outcome: Option<Outcome>,
}

impl Episode {
    pub fn rows(&self) -> usize {
        self.steps * self.n
    }

    /// Stacked history windows (`steps·n × K·obs_dim`), rebuilt from the
    /// stored observations exactly as the acting windows were. Rows of dead
    /// agents are all zero.
    pub fn windows(&self, k: usize) -> Result<Tensor> {
        let (n, d) = (self.n, self.obs_dim);
        let mut out = vec![0.0; self.rows() * k * d];
        for t in 0..self.steps {
            for i in (0..n).filter(|&i| self.alive[t * n + i]) {
                let row = &mut out[(t * n + i) * k * d..(t * n + i + 1) * k * d];
                for slot in 0..k {
                    // slot k-1 is the newest frame
                    let back = k - 1 - slot;
                    if back > t {
                        continue;
                    }
                    let s = t - back;
                    row[slot * d..(slot + 1) * d].copy_from_slice(&self.obs[(s * n + i) * d..(s * n + i + 1) * d]);
                }
            }
        }
        Tensor::new(self.rows(), k * d, out)
    }

    /// Alive masks per timestep.
    pub fn alive_masks(&self) -> Vec<Vec<bool>> {
        self.alive.chunks(self.n).map(<[bool]>::to_vec).collect()
    }
}

/// Who controls which agent: `team_policy[team]` indexes `policies`.
pub struct Controllers<'a> {
    pub policies: Vec<&'a SharedParams>,
    pub team_policy: Vec<usize>,
}

impl<'a> Controllers<'a> {
    pub fn shared(params: &'a SharedParams) -> Self {
        Controllers { policies: vec![params], team_policy: Vec::new() }
    }

    fn policy_of(&self, team: usize) -> usize {
        self.team_policy.get(team).copied().unwrap_or(0)
    }
}

pub struct Worker {
    pub index: usize,
    pub env: Box<dyn MultiAgentEnv>,
    pub rng: Rng,
    history_len: usize,
}

impl Worker {
    pub fn new(index: usize, env: Box<dyn MultiAgentEnv>, seed: u64, history_len: usize) -> Self {
        Worker { index, env, rng: Rng::worker(seed, index as u64), history_len }
    }

    /// Play one episode to completion. Greedy mode takes the argmax action.
    pub fn run_episode(&mut self, ctl: &Controllers<'_>, greedy: bool) -> Result<Episode> {
        let n = self.env.n_agents();
        let d = self.env.obs_dim();
        let env_seed = rand::RngCore::next_u64(&mut self.rng);
        let first = self.env.reset(env_seed);
        let mut windows: Vec<HistoryWindow> = (0..n).map(|i| HistoryWindow::new(i, d, self.history_len)).collect();
        let teams: Vec<usize> = (0..n).map(|i| self.env.team_of(i)).collect();
        let n_teams = self.env.n_teams();
        let mut ep = Episode {
            n,
            obs_dim: d,
            steps: 0,
            obs: Vec::new(),
            actions: Vec::new(),
            logp: Vec::new(),
            rewards: Vec::new(),
            alive: Vec::new(),
            dones: Vec::new(),
            team_returns: vec![0.0; n_teams],
            outcome: None,
        };
        let mut obs = first;
        let mut alive = self.env.alive();
        let cap = self.env.episode_length();
        for _ in 0..cap {
            for (w, o) in windows.iter_mut().zip(&obs) {
                w.push(o)?;
                ep.obs.extend_from_slice(o);
            }
            let mut logits: Vec<Option<Vec<f64>>> = vec![None; n];
            for (p, params) in ctl.policies.iter().enumerate() {
                let agents: Vec<usize> = (0..n).filter(|&i| alive[i] && ctl.policy_of(teams[i]) == p).collect();
                if agents.is_empty() {
                    continue;
                }
                let batch: Vec<&HistoryWindow> = agents.iter().map(|&i| &windows[i]).collect();
                let out = policy_logits(params, &batch)?;
                for (r, &i) in agents.iter().enumerate() {
                    logits[i] = Some(out.row(r).to_vec());
                }
            }
            // Sampling runs in agent order whoever controls the agent, so
            // swapping which policy plays which side replays the same draws.
            let mut actions = vec![0usize; n];
            let mut logps = vec![0.0; n];
            for (i, row) in logits.iter().enumerate() {
                if let Some(row) = row {
                    let a = if greedy { categorical::greedy(row) } else { categorical::sample(row, &mut self.rng) };
                    actions[i] = a;
                    logps[i] = categorical::log_softmax(row)[a];
                }
            }
            let res = self.env.step(&actions)?;
            let mut team_reward = vec![0.0; n_teams];
            for i in 0..n {
                team_reward[teams[i]] = res.rewards[i];
            }
            for (t, r) in team_reward.iter().enumerate() {
                ep.team_returns[t] += r;
            }
            for i in 0..n {
                ep.actions.push(actions[i]);
                ep.logp.push(logps[i]);
                ep.rewards.push(res.rewards[i]);
                ep.alive.push(alive[i]);
                ep.dones.push(res.done || (alive[i] && !res.alive[i]));
            }
            ep.steps += 1;
            alive = res.alive;
            obs = res.obs;
            if res.done {
                break;
            }
        }
        if let Some(last) = ep.dones.len().checked_sub(n) {
            ep.dones[last..].iter_mut().for_each(|d| *d = true);
        }
        ep.outcome = self.env.outcome();
        Ok(ep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvSettings, Registry};
    use crate::nets::{CriticHead, CriticInput, NetSpec};

    fn params(obs_dim: usize, n_actions: usize, n: usize, k: usize) -> SharedParams {
        let spec = NetSpec {
            obs_dim,
            history_len: k,
            hidden: 16,
            n_actions,
            n_agents: n,
            critic_input: CriticInput::Individual,
            critic_head: CriticHead::Value,
            grouping_head: false,
            gat: None,
        };
        SharedParams::new(spec, &mut Rng::seed_from(2)).unwrap()
    }

    #[test]
    fn windows_rebuild_matches_acting_windows() {
        let r = Registry::builtin();
        let env = r.build("battle_lite_4v4", &EnvSettings::new(), 12).unwrap();
        let (d, a) = (env.obs_dim(), env.n_actions());
        let p = params(d, a, 8, 3);
        let mut w = Worker::new(0, env, 5, 3);
        let ep = w.run_episode(&Controllers::shared(&p), false).unwrap();
        let win = ep.windows(3).unwrap();
        let mut h: Vec<HistoryWindow> = (0..8).map(|i| HistoryWindow::new(i, d, 3)).collect();
        for t in 0..ep.steps {
            for i in 0..8 {
                h[i].push(&ep.obs[(t * 8 + i) * d..(t * 8 + i + 1) * d]).unwrap();
                if ep.alive[t * 8 + i] {
                    assert_eq!(win.row(t * 8 + i), h[i].flattened().as_slice());
                } else {
                    assert!(win.row(t * 8 + i).iter().all(|&v| v == 0.0));
                }
            }
        }
        assert!(ep.dones[ep.rows() - 8..].iter().all(|&x| x));
    }

    #[test]
    fn same_seed_same_episode() {
        let r = Registry::builtin();
        let mk = || {
            let env = r.build("gather_lite_24", &EnvSettings::new(), 15).unwrap();
            let p = params(env.obs_dim(), env.n_actions(), 24, 2);
            let mut w = Worker::new(3, env, 9, 2);
            let e = w.run_episode(&Controllers::shared(&p), false).unwrap();
            (e.actions, e.rewards, e.logp)
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn acting_reads_only_own_window() {
        let p = params(3, 4, 3, 2);
        let mut ws: Vec<HistoryWindow> = (0..3).map(|i| HistoryWindow::new(i, 3, 2)).collect();
        ws[0].push(&[0.1, 0.2, 0.3]).unwrap();
        ws[1].push(&[0.4, 0.5, 0.6]).unwrap();
        let clean = policy_logits(&p, &[&ws[0], &ws[1], &ws[2]]).unwrap();
        ws[1].push(&[f64::NAN; 3]).unwrap();
        ws[2].push(&[f64::NAN; 3]).unwrap();
        let poisoned = policy_logits(&p, &[&ws[0], &ws[1], &ws[2]]).unwrap();
        assert!(poisoned.row(0).iter().all(|v| v.is_finite()));
        assert_eq!(clean.row(0), poisoned.row(0));
    }
}
