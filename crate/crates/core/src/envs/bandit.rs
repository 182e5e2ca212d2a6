use super::{check_actions, EnvSettings, Event, MultiAgentEnv, StepResult};
use crate::error::Result;

/// One agent, one step, two arms.
#[derive(Debug, Clone)]
pub struct Bandit {
    payoff: [f64; 2],
    done: bool,
    log: Option<Vec<Event>>,
}

impl Bandit {
    pub fn defaults() -> Vec<(&'static str, f64)> {
        vec![("arm0_reward", 0.0), ("arm1_reward", 1.0)]
    }

    pub fn build(s: &EnvSettings, _episode_length: usize) -> Result<Box<dyn MultiAgentEnv>> {
        Ok(Box::new(Bandit { payoff: [s["arm0_reward"], s["arm1_reward"]], done: false, log: None }))
    }
}

impl MultiAgentEnv for Bandit {
    fn name(&self) -> &str {
        "bandit"
    }
    fn n_agents(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn episode_length(&self) -> usize {
        1
    }

    fn reset(&mut self, _seed: u64) -> Vec<Vec<f64>> {
        self.done = false;
        if let Some(l) = self.log.as_mut() {
            l.clear();
        }
        vec![vec![1.0]]
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_actions(actions, 1, 2)?;
        let r = self.payoff[actions[0]];
        self.done = true;
        if let Some(l) = self.log.as_mut() {
            l.push(Event::Step { t: 0, team_rewards: vec![r] });
        }
        Ok(StepResult { obs: vec![vec![1.0]], rewards: vec![r], done: true, alive: vec![true] })
    }

    fn alive(&self) -> Vec<bool> {
        vec![true]
    }

    fn set_event_log(&mut self, on: bool) {
        self.log = on.then(Vec::new);
    }

    fn events(&self) -> &[Event] {
        self.log.as_deref().unwrap_or(&[])
    }
}
