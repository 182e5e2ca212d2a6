use super::grid::{observe, occupancy, resolve_moves, Action, Grid, Pos, View};
use super::{check_actions, setting_usize, EnvSettings, Event, MultiAgentEnv, StepResult};
use crate::error::{Error, Result};
use crate::reparam::Rng;

const N_ACTIONS: usize = 5;

/// Two buttons in opposite corners. The team is rewarded only on steps where
/// both are occupied at once.
#[derive(Debug, Clone)]
pub struct Buttons {
    grid: Grid,
    n: usize,
    cap: usize,
    press_reward: f64,
    step_reward: f64,
    positions: Vec<Pos>,
    last_action: Vec<Option<usize>>,
    t: usize,
    log: Option<Vec<Event>>,
}

impl Buttons {
    pub fn defaults() -> Vec<(&'static str, f64)> {
        vec![("width", 9.0), ("height", 9.0), ("agents", 4.0), ("press_reward", 1.0), ("step_reward", -0.01)]
    }

    pub fn build(s: &EnvSettings, episode_length: usize) -> Result<Box<dyn MultiAgentEnv>> {
        Ok(Box::new(Buttons::new(s, episode_length)?))
    }

    pub fn new(s: &EnvSettings, episode_length: usize) -> Result<Self> {
        let (w, h) = (setting_usize(s, "width", 2)?, setting_usize(s, "height", 2)?);
        let n = setting_usize(s, "agents", 2)?;
        if n + 2 > w * h {
            return Err(Error::Config("buttons grid too small for its agents".into()));
        }
        Ok(Buttons {
            grid: Grid::new(w, h),
            n,
            cap: episode_length,
            press_reward: s["press_reward"],
            step_reward: s["step_reward"],
            positions: vec![(0, 0); n],
            last_action: vec![None; n],
            t: 0,
            log: None,
        })
    }

    pub fn buttons(&self) -> [Pos; 2] {
        [(0, 0), (self.grid.width - 1, self.grid.height - 1)]
    }

    pub fn positions(&self) -> &[Pos] {
        &self.positions
    }

    pub fn set_positions(&mut self, positions: Vec<Pos>) {
        assert_eq!(positions.len(), self.n);
        self.positions = positions;
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        let alive = vec![true; self.n];
        let at = occupancy(&self.grid, &self.positions, &alive);
        let team = vec![0; self.n];
        let buttons = self.buttons();
        let item = |p: Pos| if buttons.contains(&p) { 1.0 } else { 0.0 };
        let view = View { grid: &self.grid, agent_at: &at, team: &team, item_at: &item };
        (0..self.n)
            .map(|i| observe(&view, i, self.positions[i], true, 1.0, self.last_action[i], N_ACTIONS))
            .collect()
    }
}

impl MultiAgentEnv for Buttons {
    fn name(&self) -> &str {
        "buttons"
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
        let buttons = self.buttons();
        self.positions = self.grid.distinct_cells(self.n, &mut rng, |p| !buttons.contains(&p));
        self.last_action = vec![None; self.n];
        self.t = 0;
        if let Some(log) = self.log.as_mut() {
            log.clear();
        }
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(actions, self.n, N_ACTIONS)?;
        let moves: Vec<Option<Pos>> = actions
            .iter()
            .map(|&a| match Action::decode(a) {
                Action::Move(d) => Some(d),
                _ => None,
            })
            .collect();
        self.positions = resolve_moves(&self.grid, &self.positions, &vec![true; self.n], &moves, |_| false);
        self.last_action = actions.iter().map(|&a| Some(a)).collect();
        let both = self.buttons().iter().all(|b| self.positions.contains(b));
        let r = if both { self.press_reward } else { self.step_reward };
        let t = self.t;
        self.t += 1;
        if let Some(log) = self.log.as_mut() {
            log.push(Event::Press { t, both });
            log.push(Event::Step { t, team_rewards: vec![r] });
        }
        Ok(StepResult { obs: self.observations(), rewards: vec![r; self.n], done: self.t >= self.cap, alive: vec![true; self.n] })
    }

    fn alive(&self) -> Vec<bool> {
        vec![true; self.n]
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

    fn env(cap: usize) -> Buttons {
        Buttons::new(&Buttons::defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect(), cap).unwrap()
    }

    #[test]
    fn simultaneous_press_pays() {
        let mut e = env(10);
        e.reset(0);
        e.set_positions(vec![(1, 0), (8, 7), (4, 4), (5, 5)]);
        // agent 0 left, agent 1 down
        let r = e.step(&[3, 2, 0, 0]).unwrap();
        assert!(r.rewards.iter().all(|&x| x == 1.0));
        let r = e.step(&[4, 0, 0, 0]).unwrap();
        assert!(r.rewards.iter().all(|&x| x == -0.01));
    }

    #[test]
    fn reward_matches_event_log() {
        let mut e = env(60);
        e.set_event_log(true);
        let mut rng = Rng::seed_from(5);
        for ep in 0..20 {
            e.reset(ep);
            e.set_positions(vec![(1, 1), (7, 7), (0, 1), (8, 7)]);
            let mut total = 0.0;
            loop {
                let acts: Vec<usize> = (0..4).map(|_| rng.below(N_ACTIONS)).collect();
                let r = e.step(&acts).unwrap();
                total += r.rewards[0];
                if r.done {
                    break;
                }
            }
            let presses = e.events().iter().filter(|ev| matches!(ev, Event::Press { both: true, .. })).count() as f64;
            let others = e.events().iter().filter(|ev| matches!(ev, Event::Press { both: false, .. })).count() as f64;
            assert!((total - (presses - 0.01 * others)).abs() < 1e-9);
            assert_eq!(presses + others, 60.0);
        }
    }

    #[test]
    fn locality() {
        let mut e = env(5);
        e.reset(0);
        e.set_positions(vec![(4, 4), (0, 8), (4, 8), (8, 4)]);
        let before = e.observations()[0].clone();
        e.set_positions(vec![(4, 4), (1, 8), (4, 7), (8, 5)]);
        // agent 2 moved inside agent 0's window
        assert_ne!(before, e.observations()[0]);
        e.set_positions(vec![(4, 4), (0, 8), (4, 8), (8, 4)]);
        let a = e.observations()[0].clone();
        e.set_positions(vec![(4, 4), (8, 0), (4, 8), (8, 4)]);
        assert_eq!(a, e.observations()[0]);
    }
}
