//! The training loop: parallel rollouts, a no-grad critic pass per worker,
//! then updates whose gradients are computed per episode and summed in
//! worker order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvSettings, Registry};
use crate::error::{Error, Result};
use crate::grouping::{draw_fixed_links, extract_groups, node_information_sums, GroupAssignment};
use crate::nets::SharedParams;
use crate::numcore::{Tape, Tensor};
use crate::reparam::{Rng, RngState};

use super::config::{Algorithm, Paradigm, ParadigmConfig};
use super::critic::{forward, record, LinkRecord};
use super::losses::{
    ac_policy_loss, compute_gae, mean_entropy, normalize_advantages, ppo_loss, td_q_loss, td_targets, value_loss,
};
use super::optim::{clip_global_norm, Adam};
use super::rollout::{Controllers, Episode, Worker};

/// One row of the metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub env_steps: u64,
    pub mean_episode_reward: f64,
    pub win_rate: Option<f64>,
    pub avg_node_information: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Kept out of the serialized record so same-seed runs produce identical
    /// files.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// A worker's episode plus what the critic pass recorded.
pub struct Collected {
    pub episode: Episode,
    pub links: Option<LinkRecord>,
    pub values: Vec<f64>,
    pub node_info: (u64, u64),
}

enum Targets {
    Ppo { advantages: Vec<Vec<f64>>, returns: Vec<Vec<f64>> },
    Ac,
}

/// `1 / alive rows` over the episodes in `mb`, or 0 if nobody was alive.
fn alive_scale(data: &[Collected], mb: &[usize]) -> f64 {
    let alive: usize = mb.iter().map(|&i| data[i].episode.alive.iter().filter(|&&a| a).count()).sum();
    if alive == 0 {
        0.0
    } else {
        1.0 / alive as f64
    }
}

#[derive(Default, Clone, Copy)]
struct LossStats {
    policy: f64,
    value: f64,
    entropy: f64,
}

pub struct Trainer {
    cfg: ParadigmConfig,
    env_name: String,
    n_agents: usize,
    n_teams: usize,
    workers: Vec<Worker>,
    params: SharedParams,
    fixed_links: Option<Tensor>,
    adam: Adam,
    rng: Rng,
    iteration: usize,
    env_steps: u64,
    diag_dir: PathBuf,
}

impl Trainer {
    pub fn new(
        cfg: ParadigmConfig,
        registry: &Registry,
        env_name: &str,
        env_overrides: &EnvSettings,
        diag_dir: &Path,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from(cfg.seed);
        let mut workers = Vec::with_capacity(cfg.rollout_threads);
        for i in 0..cfg.rollout_threads {
            let env = registry.build(env_name, env_overrides, cfg.episode_length)?;
            workers.push(Worker::new(i, env, cfg.seed.wrapping_add(1), cfg.history_len));
        }
        let probe = &workers[0].env;
        let (n, obs_dim, n_actions, n_teams) = (probe.n_agents(), probe.obs_dim(), probe.n_actions(), probe.n_teams());
        let params = SharedParams::new(cfg.net_spec(obs_dim, n_actions, n), &mut rng)?;
        let fixed_links = (cfg.paradigm == Paradigm::GtdeF).then(|| draw_fixed_links(n, &mut rng));
        let adam = Adam::new(&params, cfg.lr, cfg.adam_eps);
        Ok(Trainer {
            cfg,
            env_name: env_name.to_string(),
            n_agents: n,
            n_teams,
            workers,
            params,
            fixed_links,
            adam,
            rng,
            iteration: 0,
            env_steps: 0,
            diag_dir: diag_dir.to_path_buf(),
        })
    }

    pub fn config(&self) -> &ParadigmConfig {
        &self.cfg
    }

    pub fn env_name(&self) -> &str {
        &self.env_name
    }

    pub fn params(&self) -> &SharedParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut SharedParams {
        &mut self.params
    }

    pub fn fixed_links(&self) -> Option<&Tensor> {
        self.fixed_links.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }

    /// Overwrite the learner state, e.g. from a checkpoint.
    pub fn restore(
        &mut self,
        params: SharedParams,
        fixed_links: Option<Tensor>,
        rng: &RngState,
        iteration: usize,
        env_steps: u64,
    ) -> Result<()> {
        if params.spec() != self.params.spec() || params.names() != self.params.names() {
            return Err(Error::Compatibility("checkpoint network does not match the configuration".into()));
        }
        self.adam = Adam::new(&params, self.cfg.lr, self.cfg.adam_eps);
        self.params = params;
        self.fixed_links = fixed_links;
        self.rng = Rng::from_state(rng);
        self.iteration = iteration;
        self.env_steps = env_steps;
        Ok(())
    }

    /// Roll out one episode per worker and run the critic pass.
    pub fn collect(&mut self) -> Result<Vec<Collected>> {
        // Worker streams are re-keyed from the master stream every iteration,
        // so the master state alone pins down the rest of a run.
        for w in &mut self.workers {
            w.rng = Rng::seed_from(rand::RngCore::next_u64(&mut self.rng));
        }
        let cfg = &self.cfg;
        let params = &self.params;
        let fixed = self.fixed_links.as_ref();
        let n = self.n_agents;
        let results = cfg.exec.map_mut(&mut self.workers, |w| -> Result<Collected> {
            let episode = w.run_episode(&Controllers::shared(params), false)?;
            let mut tape = Tape::inference();
            let bound = params.bind(&mut tape, false);
            let windows = tape.constant(episode.windows(cfg.history_len)?);
            let f = forward(&mut tape, cfg, params, &bound, windows, None, fixed, &mut w.rng, false)?;
            let masks = episode.alive_masks();
            let groups: Vec<GroupAssignment> = match (&f.links, cfg.paradigm) {
                (Some(a), _) => extract_groups(a),
                (None, Paradigm::Ctde) => vec![GroupAssignment::everyone(n); episode.steps],
                (None, _) => vec![GroupAssignment::singletons(n); episode.steps],
            };
            let node_info = node_information_sums(&groups, &masks)?;
            let values = match cfg.algorithm {
                Algorithm::Ppo => tape.value(f.critic).data().to_vec(),
                Algorithm::Ac => Vec::new(),
            };
            Ok(Collected { links: f.links.as_ref().map(record), episode, values, node_info })
        });
        results.into_iter().collect()
    }

    /// One collect + update cycle.
    pub fn step_iteration(&mut self) -> Result<MetricRecord> {
        let start = Instant::now();
        let data = self.collect().map_err(|e| self.escalate(e))?;
        let stats = self.update(&data).map_err(|e| self.escalate(e))?;
        self.iteration += 1;
        let steps: usize = data.iter().map(|c| c.episode.steps).sum();
        self.env_steps += steps as u64;
        let k = data.len() as f64;
        let mean_episode_reward = data
            .iter()
            .map(|c| c.episode.team_returns.iter().sum::<f64>() / c.episode.team_returns.len() as f64)
            .sum::<f64>()
            / k;
        let win_rate = (self.n_teams == 2).then(|| {
            data.iter().map(|c| c.episode.outcome.map_or(0.5, |o| o.score(0))).sum::<f64>() / k
        });
        let (total, count) = data.iter().fold((0, 0), |acc, c| (acc.0 + c.node_info.0, acc.1 + c.node_info.1));
        Ok(MetricRecord {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_episode_reward,
            win_rate,
            avg_node_information: if count == 0 { 0.0 } else { total as f64 / count as f64 },
            policy_loss: stats.policy,
            value_loss: stats.value,
            entropy: stats.entropy,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Run `iterations` cycles, handing each record to `sink` as it appears.
    pub fn train(&mut self, iterations: usize, mut sink: impl FnMut(&MetricRecord, &Trainer) -> Result<()>) -> Result<()> {
        for _ in 0..iterations {
            let rec = self.step_iteration()?;
            sink(&rec, self)?;
        }
        Ok(())
    }

    /// Frozen per-episode targets for the update.
    fn targets(&self, data: &[Collected]) -> Result<Targets> {
        if self.cfg.algorithm == Algorithm::Ac {
            return Ok(Targets::Ac);
        }
        let (gamma, lambda) = (self.cfg.gamma, self.cfg.lambda);
        let mut advantages = Vec::with_capacity(data.len());
        let mut returns = Vec::with_capacity(data.len());
        for c in data {
            let (adv, ret) = episode_gae(&c.episode, &c.values, gamma, lambda)?;
            advantages.push(adv);
            returns.push(ret);
        }
        // normalized across the whole batch
        let mut flat: Vec<f64> = advantages.concat();
        let mask: Vec<bool> = data.iter().flat_map(|c| c.episode.alive.iter().copied()).collect();
        normalize_advantages(&mut flat, &mask);
        let mut offset = 0;
        for a in advantages.iter_mut() {
            let len = a.len();
            a.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(Targets::Ppo { advantages, returns })
    }

    fn update(&mut self, data: &[Collected]) -> Result<LossStats> {
        let targets = self.targets(data)?;
        let (epochs, split) = match self.cfg.algorithm {
            Algorithm::Ppo => (self.cfg.ppo_epochs, true),
            Algorithm::Ac => (1, false),
        };
        let mut totals = LossStats::default();
        let mut updates = 0;
        for _ in 0..epochs {
            let batches = if split { self.minibatches(data.len()) } else { vec![(0..data.len()).collect()] };
            for mb in batches {
                let s = self.apply_minibatch(data, &targets, &mb)?;
                totals.policy += s.policy;
                totals.value += s.value;
                totals.entropy += s.entropy;
                updates += 1;
            }
        }
        let u = updates as f64;
        Ok(LossStats { policy: totals.policy / u, value: totals.value / u, entropy: totals.entropy / u })
    }

    /// Policy, value and entropy terms over all of `data` at the current
    /// parameters, without updating anything.
    pub fn loss_snapshot(&self, data: &[Collected]) -> Result<[f64; 3]> {
        let targets = self.targets(data)?;
        let all: Vec<usize> = (0..data.len()).collect();
        let scale = alive_scale(data, &all);
        let mut out = [0.0; 3];
        for i in all {
            let (_, s) = self.episode_pass(data, &targets, i, scale, false)?;
            out[0] += s.policy;
            out[1] += s.value;
            out[2] += s.entropy;
        }
        Ok(out)
    }

    /// Shuffled partition of episode indices.
    fn minibatches(&mut self, count: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..count).collect();
        for i in (1..count).rev() {
            let j = self.rng.below(i + 1);
            idx.swap(i, j);
        }
        let k = self.cfg.minibatches.min(count).max(1);
        (0..k).map(|m| idx.iter().skip(m).step_by(k).copied().collect()).collect()
    }

    /// Loss terms of one episode; with `grad`, also the gradient of
    /// `policy + c_v·value - c_e·entropy` in parameter order.
    fn episode_pass(
        &self,
        data: &[Collected],
        targets: &Targets,
        i: usize,
        scale: f64,
        grad: bool,
    ) -> Result<(Option<Vec<Tensor>>, LossStats)> {
        let cfg = &self.cfg;
        let params = &self.params;
        let c = &data[i];
        let ep = &c.episode;
        let w: Vec<f64> = ep.alive.iter().map(|&a| if a { scale } else { 0.0 }).collect();
        let mut tape = if grad { Tape::new() } else { Tape::inference() };
        let bound = params.bind(&mut tape, grad);
        let windows = tape.constant(ep.windows(cfg.history_len)?);
        let mut unused = Rng::seed_from(0);
        let fwd = forward(&mut tape, cfg, params, &bound, windows, c.links.as_ref(), self.fixed_links.as_ref(), &mut unused, true)?;
        let lp = fwd.log_probs.expect("policy requested");
        let taken = tape.gather_cols(lp, &ep.actions)?;
        let (pl, vl) = match targets {
            Targets::Ppo { advantages, returns } => {
                let pl = ppo_loss(&mut tape, taken, &ep.logp, &advantages[i], &w, cfg.clip)?;
                let vl = value_loss(&mut tape, fwd.critic, &returns[i], &w)?;
                (pl, vl)
            }
            Targets::Ac => {
                let q_taken = tape.gather_cols(fwd.critic, &ep.actions)?;
                let q = tape.value(q_taken).data().to_vec();
                let n = ep.n;
                let q_next: Vec<f64> = (0..q.len()).map(|r| if r + n < q.len() { q[r + n] } else { 0.0 }).collect();
                let y = td_targets(&ep.rewards, &ep.dones, &q_next, cfg.gamma);
                let vl = td_q_loss(&mut tape, q_taken, &y, &w)?;
                let pl = ac_policy_loss(&mut tape, taken, &q, &w)?;
                (pl, vl)
            }
        };
        let ent = mean_entropy(&mut tape, lp, &w)?;
        let stats = LossStats { policy: tape.value(pl).item(), value: tape.value(vl).item(), entropy: tape.value(ent).item() };
        if !(stats.policy.is_finite() && stats.value.is_finite() && stats.entropy.is_finite()) {
            return Err(Error::NonFinite { op: "training loss" });
        }
        if !grad {
            return Ok((None, stats));
        }
        let v_term = tape.scale(vl, cfg.value_loss_coef)?;
        let e_term = tape.scale(ent, -cfg.entropy_coef)?;
        let t = tape.add(pl, v_term)?;
        let total = tape.add(t, e_term)?;
        let mut g = tape.backward(total)?;
        let grads = bound
            .vars()
            .iter()
            .zip(params.values())
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
            .collect();
        Ok((Some(grads), stats))
    }

    /// Sum per-episode gradients in index order, clip, and step.
    fn apply_minibatch(&mut self, data: &[Collected], targets: &Targets, mb: &[usize]) -> Result<LossStats> {
        let scale = alive_scale(data, mb);
        if scale == 0.0 {
            return Ok(LossStats::default());
        }
        let this = &*self;
        let per_episode = self.cfg.exec.map(mb.to_vec(), |i| this.episode_pass(data, targets, i, scale, true));
        let mut sum: Option<Vec<Tensor>> = None;
        let mut stats = LossStats::default();
        for r in per_episode {
            let (g, s) = match r {
                Ok((Some(g), s)) => (g, s),
                Ok((None, _)) => unreachable!("gradient requested"),
                Err(Error::NonFinite { op }) => return Err(self.abort(op)),
                Err(e) => return Err(e),
            };
            stats.policy += s.policy;
            stats.value += s.value;
            stats.entropy += s.entropy;
            sum = Some(match sum {
                None => g,
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b);
                    }
                    acc
                }
            });
        }
        let mut grads = sum.expect("non-empty minibatch");
        let norm = clip_global_norm(&mut grads, self.cfg.max_grad_norm);
        if !norm.is_finite() {
            return Err(self.abort("gradient norm"));
        }
        self.adam.apply(&mut self.params, &grads)?;
        if self.params.values().iter().any(|p| !p.is_finite()) {
            return Err(self.abort("parameter update"));
        }
        Ok(stats)
    }

    fn escalate(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { op } => self.abort(op),
            other => other,
        }
    }

    /// Write a diagnostics file and build the abort error.
    fn abort(&self, stage: &str) -> Error {
        let path = self.diag_dir.join(format!("numerical_abort_iter{}.json", self.iteration + 1));
        let norms: Vec<(String, f64)> = self
            .params
            .names()
            .iter()
            .zip(self.params.values())
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect();
        let body = serde_json::json!({
            "iteration": self.iteration + 1,
            "stage": stage,
            "env": self.env_name,
            "paradigm": self.cfg.paradigm,
            "seed": self.cfg.seed,
            "parameter_norms": norms,
        });
        let written = std::fs::create_dir_all(&self.diag_dir)
            .and_then(|_| std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap_or_default()));
        let diagnostics = if written.is_ok() { path } else { PathBuf::new() };
        Error::NumericalAbort { reason: format!("non-finite value in {stage}"), diagnostics }
    }
}

/// GAE per agent over one episode, flattened back to `t * n + i`.
pub fn episode_gae(ep: &Episode, values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = ep.n;
    if values.len() != ep.rows() {
        return Err(Error::shape("episode_gae", format!("{} values for {} rows", values.len(), ep.rows())));
    }
    let mut adv = vec![0.0; ep.rows()];
    let mut ret = vec![0.0; ep.rows()];
    for i in 0..n {
        let pick = |v: &[f64]| (0..ep.steps).map(|t| v[t * n + i]).collect::<Vec<f64>>();
        let dones: Vec<bool> = (0..ep.steps).map(|t| ep.dones[t * n + i]).collect();
        let (a, r) = compute_gae(&pick(&ep.rewards), &pick(values), &dones, 0.0, gamma, lambda)?;
        for t in 0..ep.steps {
            adv[t * n + i] = a[t];
            ret[t * n + i] = r[t];
        }
    }
    Ok((adv, ret))
}

/// Build a trainer and run it for `iterations`, returning the metric stream.
pub fn train(
    cfg: ParadigmConfig,
    registry: &Registry,
    env_name: &str,
    env_overrides: &EnvSettings,
    iterations: usize,
    diag_dir: &Path,
) -> Result<(Trainer, Vec<MetricRecord>)> {
    let mut t = Trainer::new(cfg, registry, env_name, env_overrides, diag_dir)?;
    let mut out = Vec::with_capacity(iterations);
    t.train(iterations, |r, _| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok((t, out))
}
