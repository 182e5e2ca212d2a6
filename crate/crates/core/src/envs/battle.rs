use super::gather::push;
use super::grid::{observe, occupancy, resolve_moves, Action, Grid, Pos, View};
use super::{check_actions, setting_usize, EnvSettings, Event, MultiAgentEnv, Outcome, StepResult};
use crate::error::{Error, Result};
use crate::reparam::Rng;

const N_ACTIONS: usize = 9;

/// Two equal teams. Agents `0..m` are team 0, `m..2m` team 1. A team wins by
/// eliminating the other before the step cap.
#[derive(Debug, Clone)]
pub struct BattleLite {
    grid: Grid,
    m: usize,
    cap: usize,
    max_hp: u32,
    step_reward: f64,
    attack_penalty: f64,
    attack_reward: f64,
    dead_penalty: f64,
    team: Vec<usize>,
    positions: Vec<Pos>,
    hp: Vec<u32>,
    alive: Vec<bool>,
    last_action: Vec<Option<usize>>,
    t: usize,
    outcome: Option<Outcome>,
    log: Option<Vec<Event>>,
}

impl BattleLite {
    pub fn defaults() -> Vec<(&'static str, f64)> {
        vec![
            ("width", 15.0),
            ("height", 15.0),
            ("team_size", 8.0),
            ("hp", 3.0),
            ("step_reward", -0.005),
            ("attack_penalty", -0.1),
            ("attack_reward", 0.2),
            ("dead_penalty", -0.1),
        ]
    }

    pub fn small_defaults() -> Vec<(&'static str, f64)> {
        let mut d = Self::defaults();
        for (k, v) in d.iter_mut() {
            match *k {
                "width" | "height" => *v = 9.0,
                "team_size" => *v = 4.0,
                _ => {}
            }
        }
        d
    }

    pub fn build(s: &EnvSettings, episode_length: usize) -> Result<Box<dyn MultiAgentEnv>> {
        Ok(Box::new(BattleLite::new(s, episode_length)?))
    }

    pub fn new(s: &EnvSettings, episode_length: usize) -> Result<Self> {
        let (w, h) = (setting_usize(s, "width", 3)?, setting_usize(s, "height", 1)?);
        let m = setting_usize(s, "team_size", 1)?;
        if m > (w / 3) * h {
            return Err(Error::Config("battle grid too small for its teams".into()));
        }
        let n = 2 * m;
        Ok(BattleLite {
            grid: Grid::new(w, h),
            m,
            cap: episode_length,
            max_hp: setting_usize(s, "hp", 1)? as u32,
            step_reward: s["step_reward"],
            attack_penalty: s["attack_penalty"],
            attack_reward: s["attack_reward"],
            dead_penalty: s["dead_penalty"],
            team: (0..n).map(|i| i / m).collect(),
            positions: vec![(0, 0); n],
            hp: vec![0; n],
            alive: vec![true; n],
            last_action: vec![None; n],
            t: 0,
            outcome: None,
            log: None,
        })
    }

    pub fn positions(&self) -> &[Pos] {
        &self.positions
    }

    pub fn hp(&self) -> &[u32] {
        &self.hp
    }

    pub fn set_positions(&mut self, positions: Vec<Pos>) {
        assert_eq!(positions.len(), 2 * self.m);
        self.positions = positions;
    }

    /// Same state reflected left to right; indices and teams unchanged.
    pub fn mirrored(&self) -> Self {
        let mut m = self.clone();
        let w = self.grid.width;
        m.positions = self.positions.iter().map(|&(x, y)| (w - 1 - x, y)).collect();
        m.last_action = self.last_action.iter().map(|a| a.map(Action::mirror_id)).collect();
        m
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        let at = occupancy(&self.grid, &self.positions, &self.alive);
        let item = |_: Pos| 0.0;
        let view = View { grid: &self.grid, agent_at: &at, team: &self.team, item_at: &item };
        (0..2 * self.m)
            .map(|i| {
                let health = self.hp[i] as f64 / self.max_hp as f64;
                observe(&view, i, self.positions[i], self.alive[i], health, self.last_action[i], N_ACTIONS)
            })
            .collect()
    }
}

impl MultiAgentEnv for BattleLite {
    fn name(&self) -> &str {
        "battle_lite"
    }
    fn n_agents(&self) -> usize {
        2 * self.m
    }
    fn obs_dim(&self) -> usize {
        Grid::obs_dim(N_ACTIONS)
    }
    fn n_actions(&self) -> usize {
        N_ACTIONS
    }
    fn episode_length(&self) -> usize {
        self.cap
    }
    fn n_teams(&self) -> usize {
        2
    }
    fn team_of(&self, agent: usize) -> usize {
        self.team[agent]
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::seed_from(seed);
        let band = self.grid.width / 3;
        let w = self.grid.width;
        let left = self.grid.distinct_cells(self.m, &mut rng, |p| p.0 < band);
        let right = self.grid.distinct_cells(self.m, &mut rng, |p| p.0 >= w - band);
        self.positions = left.into_iter().chain(right).collect();
        let n = 2 * self.m;
        self.hp = vec![self.max_hp; n];
        self.alive = vec![true; n];
        self.last_action = vec![None; n];
        self.t = 0;
        self.outcome = None;
        if let Some(l) = self.log.as_mut() {
            l.clear();
        }
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        let n = 2 * self.m;
        check_actions(actions, n, N_ACTIONS)?;
        let t = self.t;
        let acting = self.alive.clone();
        let decoded: Vec<Action> = actions.iter().map(|&a| Action::decode(a)).collect();
        let moves: Vec<Option<Pos>> = decoded.iter().map(|a| if let Action::Move(d) = a { Some(*d) } else { None }).collect();
        self.positions = resolve_moves(&self.grid, &self.positions, &acting, &moves, |_| false);

        let at = occupancy(&self.grid, &self.positions, &acting);
        let mut team_reward = [0.0; 2];
        let mut damage = vec![0u32; n];
        for i in (0..n).filter(|&i| acting[i]) {
            let side = self.team[i];
            team_reward[side] += self.step_reward;
            let Action::Attack((dx, dy)) = decoded[i] else { continue };
            let cell = (self.positions[i].0 + dx, self.positions[i].1 + dy);
            let target = if self.grid.contains(cell) { at[self.grid.index(cell)] } else { None };
            match target {
                Some(j) if self.team[j] != side => {
                    damage[j] += 1;
                    team_reward[side] += self.attack_reward;
                    push(&mut self.log, Event::Hit { t, agent: i, target: j });
                }
                _ => {
                    team_reward[side] += self.attack_penalty;
                    push(&mut self.log, Event::Miss { t, agent: i });
                }
            }
        }
        for j in (0..n).filter(|&j| damage[j] > 0) {
            self.hp[j] = self.hp[j].saturating_sub(damage[j]);
            if self.hp[j] == 0 {
                self.alive[j] = false;
                team_reward[self.team[j]] += self.dead_penalty;
                push(&mut self.log, Event::Death { t, agent: j });
            }
        }
        for i in 0..n {
            self.last_action[i] = if self.alive[i] { Some(actions[i]) } else { None };
        }
        self.t += 1;
        push(&mut self.log, Event::Step { t, team_rewards: team_reward.to_vec() });

        let standing = |side: usize| (0..n).any(|i| self.team[i] == side && self.alive[i]);
        let (a, b) = (standing(0), standing(1));
        let done = !a || !b || self.t >= self.cap;
        if done {
            self.outcome = Some(match (a, b) {
                (true, false) => Outcome::Win(0),
                (false, true) => Outcome::Win(1),
                _ => Outcome::Draw,
            });
        }
        let rewards = (0..n).map(|i| team_reward[self.team[i]]).collect();
        Ok(StepResult { obs: self.observations(), rewards, done, alive: self.alive.clone() })
    }

    fn alive(&self) -> Vec<bool> {
        self.alive.clone()
    }

    fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    fn set_event_log(&mut self, on: bool) {
        self.log = on.then(Vec::new);
    }

    fn events(&self) -> &[Event] {
        self.log.as_deref().unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(defaults: Vec<(&'static str, f64)>, cap: usize) -> BattleLite {
        BattleLite::new(&defaults.into_iter().map(|(k, v)| (k.to_string(), v)).collect(), cap).unwrap()
    }

    #[test]
    fn reward_constants() {
        let mut e = env(BattleLite::defaults(), 100);
        e.reset(0);
        let mut pos: Vec<Pos> = (0..16).map(|i| (i % 8, 14 - 4 * (i / 8) as i32)).collect();
        pos[0] = (5, 5);
        pos[8] = (6, 5);
        e.set_positions(pos);
        let mut acts = vec![0; 16];
        acts[0] = 8;
        acts[1] = 5; // attack up into nothing
        let r = e.step(&acts).unwrap();
        assert!((r.rewards[0] - (8.0 * -0.005 + 0.2 - 0.1)).abs() < 1e-12);
        assert!((r.rewards[8] - 8.0 * -0.005).abs() < 1e-12);
        assert_eq!(e.hp()[8], 2);
        e.step(&acts).unwrap();
        let r = e.step(&acts).unwrap();
        assert!(!r.alive[8]);
        assert!((r.rewards[8] - (8.0 * -0.005 - 0.1)).abs() < 1e-12);
        assert!(r.obs[8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elimination_wins_and_cap_draws() {
        let mut e = env(BattleLite::small_defaults(), 3);
        e.reset(2);
        for _ in 0..3 {
            e.step(&[0; 8]).unwrap();
        }
        assert_eq!(e.outcome(), Some(Outcome::Draw));

        let mut s = BattleLite::small_defaults();
        s.iter_mut().find(|(k, _)| *k == "team_size").unwrap().1 = 1.0;
        s.iter_mut().find(|(k, _)| *k == "hp").unwrap().1 = 1.0;
        let mut e = env(s, 10);
        e.reset(0);
        e.set_positions(vec![(3, 3), (4, 3)]);
        let r = e.step(&[8, 0]).unwrap();
        assert!(r.done);
        assert_eq!(e.outcome(), Some(Outcome::Win(0)));
        assert_eq!(Outcome::Win(0).score(1), 0.0);
    }

    #[test]
    fn mirror_symmetry() {
        let mut rng = Rng::seed_from(17);
        for seed in 0..10 {
            let mut a = env(BattleLite::defaults(), 60);
            a.reset(seed);
            let mut b = a.mirrored();
            let w = 15;
            for _ in 0..60 {
                let acts: Vec<usize> = (0..16).map(|_| rng.below(N_ACTIONS)).collect();
                let mirrored: Vec<usize> = acts.iter().map(|&x| Action::mirror_id(x)).collect();
                let ra = a.step(&acts).unwrap();
                let rb = b.step(&mirrored).unwrap();
                assert_eq!(ra.rewards, rb.rewards);
                assert_eq!(ra.alive, rb.alive);
                assert_eq!(a.hp(), b.hp());
                let flipped: Vec<Pos> = a.positions().iter().map(|&(x, y)| (w - 1 - x, y)).collect();
                assert_eq!(flipped, b.positions());
                if ra.done {
                    assert_eq!(a.outcome(), b.outcome());
                    break;
                }
            }
        }
    }

    #[test]
    fn locality() {
        let mut e = env(BattleLite::defaults(), 10);
        e.reset(4);
        let base = e.positions().to_vec();
        let obs0 = e.observations()[0].clone();
        let me = base[0];
        for j in 1..16 {
            let far = (0..15).flat_map(|x| (0..15).map(move |y| (x, y))).find(|&(x, y)| {
                ((x - me.0).abs() > OBS_RADIUS_I || (y - me.1).abs() > OBS_RADIUS_I) && !base.contains(&(x, y))
            });
            let (x, y) = base[j];
            if (x - me.0).abs() > OBS_RADIUS_I || (y - me.1).abs() > OBS_RADIUS_I {
                let mut p = base.clone();
                p[j] = far.unwrap();
                e.set_positions(p);
                assert_eq!(e.observations()[0], obs0);
            }
        }
    }

    const OBS_RADIUS_I: i32 = crate::envs::OBS_RADIUS;
}
