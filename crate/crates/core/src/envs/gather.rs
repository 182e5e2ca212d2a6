use super::grid::{observe, occupancy, resolve_moves, Action, Grid, Pos, View};
use super::{check_actions, setting_usize, EnvSettings, Event, MultiAgentEnv, StepResult};
use crate::error::{Error, Result};
use crate::reparam::Rng;

const N_ACTIONS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Food {
    pub pos: Pos,
    pub remaining: u32,
}

/// Cooperative foraging. Food blocks movement and must be attacked
/// `food_hits` times; agents can also kill each other with one attack.
#[derive(Debug, Clone)]
pub struct GatherLite {
    grid: Grid,
    n: usize,
    cap: usize,
    n_food: usize,
    food_hits: u32,
    step_reward: f64,
    attack_penalty: f64,
    dead_penalty: f64,
    attack_reward: f64,
    food_reward: f64,
    positions: Vec<Pos>,
    alive: Vec<bool>,
    last_action: Vec<Option<usize>>,
    food: Vec<Food>,
    consumed_hits: u64,
    t: usize,
    log: Option<Vec<Event>>,
}

impl GatherLite {
    pub fn defaults() -> Vec<(&'static str, f64)> {
        vec![
            ("width", 13.0),
            ("height", 13.0),
            ("agents", 24.0),
            ("foods", 30.0),
            ("food_hits", 5.0),
            ("step_reward", -0.01),
            ("attack_penalty", -0.1),
            ("dead_penalty", -1.0),
            ("attack_reward", 0.2),
            ("food_reward", 0.5),
        ]
    }

    pub fn build(s: &EnvSettings, episode_length: usize) -> Result<Box<dyn MultiAgentEnv>> {
        Ok(Box::new(GatherLite::new(s, episode_length)?))
    }

    pub fn new(s: &EnvSettings, episode_length: usize) -> Result<Self> {
        let (w, h) = (setting_usize(s, "width", 1)?, setting_usize(s, "height", 1)?);
        let n = setting_usize(s, "agents", 1)?;
        let n_food = setting_usize(s, "foods", 0)?;
        if n + n_food > w * h {
            return Err(Error::Config("gather grid too small for agents and food".into()));
        }
        Ok(GatherLite {
            grid: Grid::new(w, h),
            n,
            cap: episode_length,
            n_food,
            food_hits: setting_usize(s, "food_hits", 1)? as u32,
            step_reward: s["step_reward"],
            attack_penalty: s["attack_penalty"],
            dead_penalty: s["dead_penalty"],
            attack_reward: s["attack_reward"],
            food_reward: s["food_reward"],
            positions: vec![(0, 0); n],
            alive: vec![true; n],
            last_action: vec![None; n],
            food: Vec::new(),
            consumed_hits: 0,
            t: 0,
            log: None,
        })
    }

    pub fn food(&self) -> &[Food] {
        &self.food
    }

    pub fn food_hits(&self) -> u32 {
        self.food_hits
    }

    pub fn consumed_hits(&self) -> u64 {
        self.consumed_hits
    }

    pub fn positions(&self) -> &[Pos] {
        &self.positions
    }

    /// Replace the layout; food starts untouched.
    pub fn set_layout(&mut self, positions: Vec<Pos>, food: Vec<Pos>) {
        assert_eq!(positions.len(), self.n);
        self.positions = positions;
        self.food = food.into_iter().map(|pos| Food { pos, remaining: self.food_hits }).collect();
    }

    fn food_at(&self, p: Pos) -> Option<usize> {
        self.food.iter().position(|f| f.pos == p && f.remaining > 0)
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        let at = occupancy(&self.grid, &self.positions, &self.alive);
        let team = vec![0; self.n];
        let item = |p: Pos| self.food_at(p).map_or(0.0, |k| self.food[k].remaining as f64 / self.food_hits as f64);
        let view = View { grid: &self.grid, agent_at: &at, team: &team, item_at: &item };
        (0..self.n)
            .map(|i| observe(&view, i, self.positions[i], self.alive[i], 1.0, self.last_action[i], N_ACTIONS))
            .collect()
    }
}

impl MultiAgentEnv for GatherLite {
    fn name(&self) -> &str {
        "gather_lite"
    }
    fn n_agents(&self) -> usize {
        self.n
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

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::seed_from(seed);
        let cells = self.grid.distinct_cells(self.n + self.n_food, &mut rng, |_| true);
        self.positions = cells[..self.n].to_vec();
        self.food = cells[self.n..].iter().map(|&pos| Food { pos, remaining: self.food_hits }).collect();
        self.alive = vec![true; self.n];
        self.last_action = vec![None; self.n];
        self.consumed_hits = 0;
        self.t = 0;
        if let Some(log) = self.log.as_mut() {
            log.clear();
        }
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(actions, self.n, N_ACTIONS)?;
        let t = self.t;
        let acting = self.alive.clone();
        let decoded: Vec<Action> = actions.iter().map(|&a| Action::decode(a)).collect();
        let moves: Vec<Option<Pos>> = decoded.iter().map(|a| if let Action::Move(d) = a { Some(*d) } else { None }).collect();
        let blocked: Vec<Pos> = self.food.iter().filter(|f| f.remaining > 0).map(|f| f.pos).collect();
        self.positions = resolve_moves(&self.grid, &self.positions, &acting, &moves, |p| blocked.contains(&p));

        let at = occupancy(&self.grid, &self.positions, &acting);
        let mut reward = 0.0;
        let mut victims = vec![false; self.n];
        for i in (0..self.n).filter(|&i| acting[i]) {
            reward += self.step_reward;
            let Action::Attack((dx, dy)) = decoded[i] else { continue };
            let cell = (self.positions[i].0 + dx, self.positions[i].1 + dy);
            if !self.grid.contains(cell) {
                reward += self.attack_penalty;
                push(&mut self.log, Event::Miss { t, agent: i });
            } else if let Some(k) = self.food_at(cell) {
                self.food[k].remaining -= 1;
                self.consumed_hits += 1;
                reward += self.food_reward;
                let remaining = self.food[k].remaining;
                push(&mut self.log, Event::FoodHit { t, agent: i, food: k, remaining });
                if remaining == 0 {
                    push(&mut self.log, Event::FoodRemoved { t, food: k });
                }
            } else if let Some(j) = at[self.grid.index(cell)] {
                victims[j] = true;
                reward += self.attack_reward;
                push(&mut self.log, Event::Hit { t, agent: i, target: j });
            } else {
                reward += self.attack_penalty;
                push(&mut self.log, Event::Miss { t, agent: i });
            }
        }
        for j in (0..self.n).filter(|&j| victims[j]) {
            self.alive[j] = false;
            reward += self.dead_penalty;
            push(&mut self.log, Event::Death { t, agent: j });
        }
        for i in 0..self.n {
            self.last_action[i] = if self.alive[i] { Some(actions[i]) } else { None };
        }
        self.t += 1;
        push(&mut self.log, Event::Step { t, team_rewards: vec![reward] });
        let done = self.t >= self.cap || self.food.iter().all(|f| f.remaining == 0) || !self.alive.iter().any(|&a| a);
        Ok(StepResult { obs: self.observations(), rewards: vec![reward; self.n], done, alive: self.alive.clone() })
    }

    fn alive(&self) -> Vec<bool> {
        self.alive.clone()
    }

    fn set_event_log(&mut self, on: bool) {
        self.log = on.then(Vec::new);
    }

    fn events(&self) -> &[Event] {
        self.log.as_deref().unwrap_or(&[])
    }
}

pub(crate) fn push(log: &mut Option<Vec<Event>>, e: Event) {
    if let Some(l) = log.as_mut() {
        l.push(e);
    }
}
