//! Deterministic object gridworld rendered as binary channel maps.
//!
//! Channels: agent, gem, big gem, hazard-or-wall. The default layout puts
//! three +1 gems on the agent's side of a wall and a +5 big gem behind a
//! one-cell gap in that wall, with -1 hazards next to the gap.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 4;
pub const CH_AGENT: usize = 0;
pub const CH_GEM: usize = 1;
pub const CH_BIG_GEM: usize = 2;
pub const CH_BLOCKED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Noop,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Noop];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL.get(i).copied().ok_or_else(|| Error::invalid(format!("action index {i} out of range")))
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Noop => (0, 0),
        }
    }
}

pub const DEFAULT_LAYOUT: [&str; 8] = [
    "....#..G", //
    ".g..#...", "....#x..", "A.......", "....#x..", ".g..#...", "..g.#...", "....#...",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    /// ASCII rows: `.` floor, `#` wall, `g` gem, `G` big gem, `x` hazard,
    /// `A` agent start.
    pub layout: Vec<String>,
    pub step_cap: usize,
    pub frames: usize,
    pub gem_reward: f64,
    pub big_gem_reward: f64,
    pub hazard_reward: f64,
    pub reward_buckets: Vec<f64>,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            layout: DEFAULT_LAYOUT.iter().map(|r| r.to_string()).collect(),
            step_cap: 50,
            frames: 4,
            gem_reward: 1.0,
            big_gem_reward: 5.0,
            hazard_reward: -1.0,
            reward_buckets: vec![-1.0, 0.0, 1.0, 5.0],
        }
    }
}

impl EnvSpec {
    pub fn height(&self) -> usize {
        self.layout.len()
    }

    pub fn width(&self) -> usize {
        self.layout.first().map_or(0, |r| r.chars().count())
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn actions(&self) -> usize {
        Action::COUNT
    }

    /// Index of `reward` in the bucket list.
    pub fn reward_class(&self, reward: f64) -> Result<usize> {
        self.reward_buckets
            .iter()
            .position(|&b| b == reward)
            .ok_or_else(|| Error::invalid(format!("reward {reward} is not a configured bucket")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub agent: (usize, usize),
    /// Live gems, in layout order.
    pub gems: Vec<(usize, usize)>,
    pub big_gem: Option<(usize, usize)>,
    pub steps: usize,
    pub done: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<S = f32> {
    pub state: EnvState,
    pub frame: Tensor<S>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectWorld {
    spec: EnvSpec,
    h: usize,
    w: usize,
    walls: Vec<bool>,
    hazards: Vec<bool>,
    start: EnvState,
}

impl ObjectWorld {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        let h = spec.height();
        let w = spec.width();
        if h == 0 || w == 0 {
            return Err(Error::Config("layout is empty".into()));
        }
        if spec.frames == 0 || spec.step_cap == 0 {
            return Err(Error::Config("frames and step_cap must be positive".into()));
        }
        if spec.reward_buckets.windows(2).any(|p| p[0].is_nan() || p[1].is_nan() || p[0] >= p[1]) {
            return Err(Error::Config("reward buckets must be strictly increasing".into()));
        }
        for r in [0.0, spec.gem_reward, spec.big_gem_reward, spec.hazard_reward] {
            spec.reward_class(r).map_err(|_| Error::Config(format!("reward {r} has no bucket")))?;
        }
        let mut walls = vec![false; h * w];
        let mut hazards = vec![false; h * w];
        let mut agent = None;
        let mut gems = Vec::new();
        let mut big_gem = None;
        for (r, row) in spec.layout.iter().enumerate() {
            if row.chars().count() != w {
                return Err(Error::Config(format!("layout row {r} has the wrong width")));
            }
            for (c, ch) in row.chars().enumerate() {
                match ch {
                    '.' => {}
                    '#' => walls[r * w + c] = true,
                    'x' => hazards[r * w + c] = true,
                    'g' => gems.push((r, c)),
                    'G' if big_gem.is_none() => big_gem = Some((r, c)),
                    'A' if agent.is_none() => agent = Some((r, c)),
                    'G' | 'A' => return Err(Error::Config(format!("layout has more than one '{ch}'"))),
                    other => return Err(Error::Config(format!("unknown layout character '{other}'"))),
                }
            }
        }
        let agent = agent.ok_or_else(|| Error::Config("layout has no agent 'A'".into()))?;
        let start = EnvState { agent, gems, big_gem, steps: 0, done: false, seed: 0 };
        Ok(Self { spec, h, w, walls, hazards, start })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn is_wall(&self, cell: (usize, usize)) -> bool {
        self.walls[cell.0 * self.w + cell.1]
    }

    pub fn is_hazard(&self, cell: (usize, usize)) -> bool {
        self.hazards[cell.0 * self.w + cell.1]
    }

    pub fn hazard_cells(&self) -> Vec<(usize, usize)> {
        (0..self.h * self.w).filter(|&i| self.hazards[i]).map(|i| (i / self.w, i % self.w)).collect()
    }

    pub fn wall_cells(&self) -> Vec<(usize, usize)> {
        (0..self.h * self.w).filter(|&i| self.walls[i]).map(|i| (i / self.w, i % self.w)).collect()
    }

    /// Initial state and observation stack (the first frame repeated).
    pub fn reset<S: Scalar>(&self, seed: u64) -> (EnvState, Tensor<S>) {
        let state = EnvState { seed, ..self.start.clone() };
        let frame = self.render(&state);
        let stack = initial_stack(&frame, self.spec.frames);
        (state, stack)
    }

    pub fn step<S: Scalar>(&self, state: &EnvState, action: Action) -> Result<StepOutcome<S>> {
        let (state, reward, done) = self.transition(state, action)?;
        let frame = self.render(&state);
        Ok(StepOutcome { state, frame, reward, done })
    }

    /// Dynamics without rendering.
    pub fn transition(&self, state: &EnvState, action: Action) -> Result<(EnvState, f64, bool)> {
        if state.done {
            return Err(Error::invalid("step called on a finished episode"));
        }
        let mut next = state.clone();
        let (dr, dc) = action.delta();
        let r = state.agent.0 as isize + dr;
        let c = state.agent.1 as isize + dc;
        if r >= 0 && c >= 0 && (r as usize) < self.h && (c as usize) < self.w && !self.is_wall((r as usize, c as usize)) {
            next.agent = (r as usize, c as usize);
        }
        next.steps += 1;
        let mut reward = 0.0;
        let mut done = false;
        if let Some(i) = next.gems.iter().position(|&g| g == next.agent) {
            next.gems.remove(i);
            reward = self.spec.gem_reward;
        } else if next.big_gem == Some(next.agent) {
            next.big_gem = None;
            reward = self.spec.big_gem_reward;
            done = true;
        } else if self.is_hazard(next.agent) {
            reward = self.spec.hazard_reward;
            done = true;
        }
        if next.steps >= self.spec.step_cap {
            done = true;
        }
        next.done = done;
        Ok((next, reward, done))
    }

    /// One-hot occupancy maps `[4, H, W]`.
    pub fn render<S: Scalar>(&self, state: &EnvState) -> Tensor<S> {
        let (h, w) = (self.h, self.w);
        let mut t = Tensor::zeros(&[CHANNELS, h, w]);
        let one = S::one();
        let d = t.data_mut();
        d[CH_AGENT * h * w + state.agent.0 * w + state.agent.1] = one;
        for &(r, c) in &state.gems {
            d[CH_GEM * h * w + r * w + c] = one;
        }
        if let Some((r, c)) = state.big_gem {
            d[CH_BIG_GEM * h * w + r * w + c] = one;
        }
        for i in 0..h * w {
            if self.walls[i] || self.hazards[i] {
                d[CH_BLOCKED * h * w + i] = one;
            }
        }
        t
    }

    /// Best achievable episode return, by dynamic programming over
    /// (agent cell, remaining objects, steps left).
    pub fn optimal_return(&self) -> f64 {
        let mut memo = HashMap::new();
        self.best_from(&self.start, &mut memo)
    }

    fn best_from(&self, state: &EnvState, memo: &mut HashMap<EnvState, f64>) -> f64 {
        if state.done {
            return 0.0;
        }
        if let Some(&v) = memo.get(state) {
            return v;
        }
        let mut best = f64::NEG_INFINITY;
        for a in Action::ALL {
            let (next, r, _) = self.transition(state, a).expect("live state");
            best = best.max(r + self.best_from(&next, memo));
        }
        memo.insert(state.clone(), best);
        best
    }

    /// Shortest path lengths (in moves) from `from` to every cell, avoiding
    /// walls and hazards; `None` for unreachable cells.
    pub fn distances(&self, from: (usize, usize)) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.h * self.w];
        let mut queue = VecDeque::new();
        dist[from.0 * self.w + from.1] = Some(0);
        queue.push_back(from);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r * self.w + c].unwrap();
            for a in [Action::Up, Action::Down, Action::Left, Action::Right] {
                let (dr, dc) = a.delta();
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr as usize >= self.h || nc as usize >= self.w {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                let i = nr * self.w + nc;
                if self.walls[i] || self.hazards[i] || dist[i].is_some() {
                    continue;
                }
                dist[i] = Some(d + 1);
                queue.push_back((nr, nc));
            }
        }
        dist
    }
}

/// `frames` copies of `frame` stacked along channels.
pub fn initial_stack<S: Scalar>(frame: &Tensor<S>, frames: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(frame.len() * frames);
    for _ in 0..frames {
        data.extend_from_slice(frame.data());
    }
    let s = frame.shape();
    Tensor::new(vec![s[0] * frames, s[1], s[2]], data).expect("consistent stack shape")
}

/// Drop the oldest frame of `stack` and append `frame`.
pub fn push_frame<S: Scalar>(stack: &Tensor<S>, frame: &Tensor<S>) -> Result<Tensor<S>> {
    let fl = frame.len();
    if stack.ndim() != 3 || frame.ndim() != 3 || !stack.len().is_multiple_of(fl) || stack.shape()[1..] != frame.shape()[1..] {
        return Err(Error::shape("push_frame", format!("stack {:?}, frame {:?}", stack.shape(), frame.shape())));
    }
    let mut data = Vec::with_capacity(stack.len());
    data.extend_from_slice(&stack.data()[fl..]);
    data.extend_from_slice(frame.data());
    Tensor::new(stack.shape().to_vec(), data)
}
