//! Shared grid mechanics: action decoding, simultaneous movement, local
//! observation windows.

use crate::reparam::Rng;

pub const OBS_RADIUS: i32 = 3;
/// allies, enemies, items (food or buttons), walls
pub const WINDOW_CHANNELS: usize = 4;

pub type Pos = (i32, i32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Stay,
    Move(Pos),
    Attack(Pos),
}

const DIRS: [Pos; 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

impl Action {
    /// 0 stay, 1..=4 move up/down/left/right, 5..=8 attack in the same order.
    pub fn decode(id: usize) -> Action {
        match id {
            0 => Action::Stay,
            1..=4 => Action::Move(DIRS[id - 1]),
            5..=8 => Action::Attack(DIRS[id - 5]),
            _ => Action::Stay,
        }
    }

    /// The action with left and right exchanged.
    pub fn mirror_id(id: usize) -> usize {
        match id {
            3 => 4,
            4 => 3,
            7 => 8,
            8 => 7,
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: i32,
    pub height: i32,
}

impl Grid {
    pub fn new(width: usize, height: usize) -> Self {
        Grid { width: width as i32, height: height as i32 }
    }

    pub fn contains(&self, p: Pos) -> bool {
        p.0 >= 0 && p.1 >= 0 && p.0 < self.width && p.1 < self.height
    }

    pub fn index(&self, p: Pos) -> usize {
        (p.1 * self.width + p.0) as usize
    }

    pub fn cells(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn pos(&self, index: usize) -> Pos {
        (index as i32 % self.width, index as i32 / self.width)
    }

    /// `k` distinct cells drawn uniformly from those passing `allowed`.
    pub fn distinct_cells(&self, k: usize, rng: &mut Rng, allowed: impl Fn(Pos) -> bool) -> Vec<Pos> {
        let mut pool: Vec<usize> = (0..self.cells()).filter(|&i| allowed(self.pos(i))).collect();
        assert!(pool.len() >= k, "grid too small for {k} entities");
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let j = rng.below(pool.len());
            out.push(self.pos(pool.swap_remove(j)));
        }
        out
    }

    pub fn window_width() -> usize {
        let side = (2 * OBS_RADIUS + 1) as usize;
        side * side * WINDOW_CHANNELS
    }

    /// Observation width: window, normalized position, health, last action.
    pub fn obs_dim(n_actions: usize) -> usize {
        Self::window_width() + 3 + n_actions
    }
}

/// Simultaneous moves. An agent keeps its cell if the target is off-grid or
/// blocked, if it would swap with another agent, or if it loses a contest.
/// A contested cell goes to an agent already standing there, otherwise to the
/// lowest index. Reverting can create new contests, so this iterates.
pub fn resolve_moves(
    grid: &Grid,
    positions: &[Pos],
    alive: &[bool],
    moves: &[Option<Pos>],
    blocked: impl Fn(Pos) -> bool,
) -> Vec<Pos> {
    let n = positions.len();
    let mut target: Vec<Pos> = (0..n)
        .map(|i| match moves[i] {
            Some((dx, dy)) if alive[i] => {
                let t = (positions[i].0 + dx, positions[i].1 + dy);
                if grid.contains(t) && !blocked(t) {
                    t
                } else {
                    positions[i]
                }
            }
            _ => positions[i],
        })
        .collect();
    let mut claim: Vec<Option<usize>> = vec![None; grid.cells()];
    loop {
        let mut changed = false;
        claim.iter_mut().for_each(|c| *c = None);
        for i in (0..n).filter(|&i| alive[i]) {
            let c = grid.index(target[i]);
            match claim[c] {
                None => claim[c] = Some(i),
                Some(k) => {
                    // i > k here, so i only wins if it already stands there
                    let stays = |a: usize| target[a] == positions[a];
                    let loser = if stays(i) && !stays(k) { k } else { i };
                    if loser == k {
                        claim[c] = Some(i);
                    }
                    target[loser] = positions[loser];
                    changed = true;
                }
            }
        }
        for i in 0..n {
            if !alive[i] || target[i] == positions[i] {
                continue;
            }
            if let Some(j) = (0..n).find(|&j| j != i && alive[j] && positions[j] == target[i] && target[j] == positions[i]) {
                target[i] = positions[i];
                target[j] = positions[j];
                changed = true;
            }
        }
        if !changed {
            return target;
        }
    }
}

/// Everything an observation window can see.
pub struct View<'a> {
    pub grid: &'a Grid,
    pub agent_at: &'a [Option<usize>],
    pub team: &'a [usize],
    pub item_at: &'a dyn Fn(Pos) -> f64,
}

/// Writes agent `i`'s observation. Dead agents get all zeros.
pub fn observe(
    view: &View<'_>,
    i: usize,
    pos: Pos,
    alive: bool,
    health: f64,
    last_action: Option<usize>,
    n_actions: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; Grid::obs_dim(n_actions)];
    if !alive {
        return out;
    }
    let side = 2 * OBS_RADIUS + 1;
    for dy in -OBS_RADIUS..=OBS_RADIUS {
        for dx in -OBS_RADIUS..=OBS_RADIUS {
            let cell = (pos.0 + dx, pos.1 + dy);
            let base = (((dy + OBS_RADIUS) * side + dx + OBS_RADIUS) as usize) * WINDOW_CHANNELS;
            if !view.grid.contains(cell) {
                out[base + 3] = 1.0;
                continue;
            }
            if let Some(j) = view.agent_at[view.grid.index(cell)] {
                let ch = if view.team[j] == view.team[i] { 0 } else { 1 };
                out[base + ch] = 1.0;
            }
            out[base + 2] = (view.item_at)(cell);
        }
    }
    let w = Grid::window_width();
    let norm = |v: i32, extent: i32| if extent > 1 { v as f64 / (extent - 1) as f64 } else { 0.0 };
    out[w] = norm(pos.0, view.grid.width);
    out[w + 1] = norm(pos.1, view.grid.height);
    out[w + 2] = health;
    if let Some(a) = last_action {
        out[w + 3 + a] = 1.0;
    }
    out
}

pub fn occupancy(grid: &Grid, positions: &[Pos], alive: &[bool]) -> Vec<Option<usize>> {
    let mut at = vec![None; grid.cells()];
    for (i, &p) in positions.iter().enumerate() {
        if alive[i] {
            at[grid.index(p)] = Some(i);
        }
    }
    at
}
