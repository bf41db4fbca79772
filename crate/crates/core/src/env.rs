//! Enumerable goal-conditioned environments.
//!
//! Transitions are deterministic and total, rewards are binary. Two families
//! are provided: `GridNav` (a clamped grid with five moves) and `ChainArith`
//! (integer values rewritten by a small set of bounded arithmetic operations).

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegoError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoalId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId(pub usize);

/// Grid moves, in action-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMove {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GridMove {
    pub const ALL: [GridMove; 5] = [
        GridMove::Up,
        GridMove::Down,
        GridMove::Left,
        GridMove::Right,
        GridMove::Stay,
    ];

    pub fn id(self) -> ActionId {
        ActionId(self as usize)
    }

    fn delta(self) -> (isize, isize) {
        match self {
            GridMove::Up => (-1, 0),
            GridMove::Down => (1, 0),
            GridMove::Left => (0, -1),
            GridMove::Right => (0, 1),
            GridMove::Stay => (0, 0),
        }
    }
}

/// A bounded integer operation; results are clamped to `[0, max_value]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ArithOp {
    Add(u32),
    Sub(u32),
    Mul(u32),
    Div(u32),
}

impl ArithOp {
    pub fn apply(self, value: u32, max_value: u32) -> u32 {
        let v = value as i64;
        let out = match self {
            ArithOp::Add(k) => v + k as i64,
            ArithOp::Sub(k) => v - k as i64,
            ArithOp::Mul(k) => v * k as i64,
            ArithOp::Div(k) => v / k as i64,
        };
        out.clamp(0, max_value as i64) as u32
    }
}

impl fmt::Display for ArithOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArithOp::Add(k) => write!(f, "+{k}"),
            ArithOp::Sub(k) => write!(f, "-{k}"),
            ArithOp::Mul(k) => write!(f, "*{k}"),
            ArithOp::Div(k) => write!(f, "/{k}"),
        }
    }
}

impl FromStr for ArithOp {
    type Err = SegoError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut chars = s.chars();
        let sym = chars
            .next()
            .ok_or_else(|| SegoError::Configuration("empty arithmetic op".into()))?;
        let k: u32 = chars
            .as_str()
            .trim()
            .parse()
            .map_err(|_| SegoError::Configuration(format!("bad operand in op {s:?}")))?;
        match sym {
            '+' => Ok(ArithOp::Add(k)),
            '-' => Ok(ArithOp::Sub(k)),
            '*' | 'x' | '×' => Ok(ArithOp::Mul(k)),
            '/' if k == 0 => Err(SegoError::Configuration("division by zero".into())),
            '/' => Ok(ArithOp::Div(k)),
            _ => Err(SegoError::Configuration(format!("unknown op {s:?}"))),
        }
    }
}

impl TryFrom<String> for ArithOp {
    type Error = SegoError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ArithOp> for String {
    fn from(op: ArithOp) -> String {
        op.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvKind {
    GridNav { width: usize, height: usize },
    ChainArith { max_value: u32, ops: Vec<ArithOp>, goal_values: Vec<u32> },
}

/// An immutable, fully tabulated environment.
#[derive(Clone, Debug)]
pub struct Environment {
    kind: EnvKind,
    num_states: usize,
    num_goals: usize,
    num_actions: usize,
    /// `transition[s * num_actions + a]`
    transition: Vec<usize>,
    /// `achieving[g * num_states + s]`
    achieving: Vec<bool>,
    horizon: usize,
    start: StateId,
    difficulty: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridNavSpec {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    /// Designated start cell as `(row, col)`.
    #[serde(default)]
    pub start: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainArithSpec {
    pub max_value: u32,
    pub ops: Vec<ArithOp>,
    pub horizon: usize,
    pub start: u32,
    /// Target values. `None` selects every value reachable from `start`
    /// within the horizon.
    #[serde(default)]
    pub goals: Option<Vec<u32>>,
}

/// 5-action clamped grid, goals are cells, designated start at cell (0, 0).
pub fn build_gridnav(width: usize, height: usize, horizon: usize) -> Result<Environment> {
    Environment::gridnav(&GridNavSpec { width, height, horizon, start: (0, 0) })
}

/// Integer chain starting at 1 with every reachable value as a goal.
pub fn build_chainarith(max_value: u32, ops: &[ArithOp], horizon: usize) -> Result<Environment> {
    Environment::chainarith(&ChainArithSpec {
        max_value,
        ops: ops.to_vec(),
        horizon,
        start: 1,
        goals: None,
    })
}

impl Environment {
    pub fn gridnav(spec: &GridNavSpec) -> Result<Environment> {
        let GridNavSpec { width, height, horizon, start } = *spec;
        if width == 0 || height == 0 {
            return Err(SegoError::Configuration(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if width * height < 2 {
            return Err(SegoError::Configuration("grid needs at least two cells".into()));
        }
        if horizon == 0 {
            return Err(SegoError::Configuration("horizon must be >= 1".into()));
        }
        if start.0 >= height || start.1 >= width {
            return Err(SegoError::Configuration(format!(
                "start cell {start:?} outside {height}x{width} grid"
            )));
        }
        let n = width * height;
        let num_actions = GridMove::ALL.len();
        let mut transition = Vec::with_capacity(n * num_actions);
        for s in 0..n {
            let (r, c) = ((s / width) as isize, (s % width) as isize);
            for mv in GridMove::ALL {
                let (dr, dc) = mv.delta();
                let (nr, nc) = (r + dr, c + dc);
                let next = if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                    s
                } else {
                    nr as usize * width + nc as usize
                };
                transition.push(next);
            }
        }
        let mut achieving = vec![false; n * n];
        for g in 0..n {
            achieving[g * n + g] = true;
        }
        let start_id = StateId(start.0 * width + start.1);
        Self::finish(
            EnvKind::GridNav { width, height },
            n,
            n,
            num_actions,
            transition,
            achieving,
            horizon,
            start_id,
        )
    }

    pub fn chainarith(spec: &ChainArithSpec) -> Result<Environment> {
        if spec.max_value < 2 {
            return Err(SegoError::Configuration("max_value must be >= 2".into()));
        }
        if spec.ops.is_empty() {
            return Err(SegoError::Configuration("op_set must be nonempty".into()));
        }
        if spec.horizon == 0 {
            return Err(SegoError::Configuration("horizon must be >= 1".into()));
        }
        if spec.start > spec.max_value {
            return Err(SegoError::Configuration(format!(
                "start value {} exceeds max_value {}",
                spec.start, spec.max_value
            )));
        }
        let n = spec.max_value as usize + 1;
        let num_actions = spec.ops.len();
        let mut transition = Vec::with_capacity(n * num_actions);
        for v in 0..n {
            for op in &spec.ops {
                transition.push(op.apply(v as u32, spec.max_value) as usize);
            }
        }
        let dist = bfs(&transition, num_actions, n, spec.start as usize);
        let goal_values: Vec<u32> = match &spec.goals {
            Some(goals) => {
                if goals.is_empty() {
                    return Err(SegoError::Configuration("goal set must be nonempty".into()));
                }
                for &g in goals {
                    if g > spec.max_value {
                        return Err(SegoError::Configuration(format!(
                            "goal value {g} exceeds max_value {}",
                            spec.max_value
                        )));
                    }
                }
                goals.clone()
            }
            None => (0..n as u32)
                .filter(|&v| matches!(dist[v as usize], Some(d) if d as usize <= spec.horizon))
                .collect(),
        };
        let mut achieving = vec![false; goal_values.len() * n];
        for (g, &value) in goal_values.iter().enumerate() {
            achieving[g * n + value as usize] = true;
        }
        Self::finish(
            EnvKind::ChainArith {
                max_value: spec.max_value,
                ops: spec.ops.clone(),
                goal_values: goal_values.clone(),
            },
            n,
            goal_values.len(),
            num_actions,
            transition,
            achieving,
            spec.horizon,
            StateId(spec.start as usize),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        kind: EnvKind,
        num_states: usize,
        num_goals: usize,
        num_actions: usize,
        transition: Vec<usize>,
        achieving: Vec<bool>,
        horizon: usize,
        start: StateId,
    ) -> Result<Environment> {
        let mut env = Environment {
            kind,
            num_states,
            num_goals,
            num_actions,
            transition,
            achieving,
            horizon,
            start,
            difficulty: Vec::new(),
        };
        let dist = env.distances_from(start);
        let mut difficulty = Vec::with_capacity(num_goals);
        for g in 0..num_goals {
            let goal = GoalId(g);
            if !(0..num_states).any(|s| env.achieves(goal, StateId(s))) {
                return Err(SegoError::Configuration(format!("goal {g} has no achieving state")));
            }
            let d = env.goal_distance(&dist, goal).ok_or_else(|| {
                SegoError::Configuration(format!("goal {g} unreachable from the start state"))
            })?;
            if d as usize > horizon {
                return Err(SegoError::Configuration(format!(
                    "goal {g} needs {d} steps from the start state, horizon is {horizon}"
                )));
            }
            difficulty.push(d);
        }
        env.difficulty = difficulty;
        Ok(env)
    }

    pub fn kind(&self) -> &EnvKind {
        &self.kind
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_goals(&self) -> usize {
        self.num_goals
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn start(&self) -> StateId {
        self.start
    }

    /// Number of waypoints `|G| * |S|`.
    pub fn grid_size(&self) -> usize {
        self.num_goals * self.num_states
    }

    pub fn check_state(&self, s: StateId) -> Result<()> {
        if s.0 < self.num_states {
            Ok(())
        } else {
            Err(SegoError::InputDomain(format!("state {} >= {}", s.0, self.num_states)))
        }
    }

    pub fn check_goal(&self, g: GoalId) -> Result<()> {
        if g.0 < self.num_goals {
            Ok(())
        } else {
            Err(SegoError::InputDomain(format!("goal {} >= {}", g.0, self.num_goals)))
        }
    }

    pub fn check_action(&self, a: ActionId) -> Result<()> {
        if a.0 < self.num_actions {
            Ok(())
        } else {
            Err(SegoError::InputDomain(format!("action {} >= {}", a.0, self.num_actions)))
        }
    }

    pub fn step(&self, s: StateId, a: ActionId) -> Result<StateId> {
        self.check_state(s)?;
        self.check_action(a)?;
        Ok(self.successor(s, a))
    }

    /// Unchecked successor for inner loops; panics on out-of-range ids.
    #[inline]
    pub fn successor(&self, s: StateId, a: ActionId) -> StateId {
        StateId(self.transition[s.0 * self.num_actions + a.0])
    }

    pub fn reward(&self, g: GoalId, s: StateId) -> Result<u8> {
        self.check_goal(g)?;
        self.check_state(s)?;
        Ok(self.achieves(g, s) as u8)
    }

    #[inline]
    pub fn achieves(&self, g: GoalId, s: StateId) -> bool {
        self.achieving[g.0 * self.num_states + s.0]
    }

    /// Shortest-solution length of `g` from the designated start.
    pub fn difficulty(&self, g: GoalId) -> u32 {
        self.difficulty[g.0]
    }

    /// BFS step counts from `from` to every state (`None` if unreachable).
    pub fn distances_from(&self, from: StateId) -> Vec<Option<u32>> {
        bfs(&self.transition, self.num_actions, self.num_states, from.0)
    }

    fn goal_distance(&self, dist: &[Option<u32>], g: GoalId) -> Option<u32> {
        (0..self.num_states)
            .filter(|&s| self.achieves(g, StateId(s)))
            .filter_map(|s| dist[s])
            .min()
    }

    /// Shortest number of steps from `s` to any state achieving `g`.
    pub fn task_difficulty(&self, g: GoalId, s: StateId) -> Option<u32> {
        self.goal_distance(&self.distances_from(s), g)
    }

    /// All non-trivial `(goal, state)` tasks solvable within the horizon.
    pub fn task_set(&self) -> Vec<(GoalId, StateId)> {
        let mut tasks = Vec::new();
        let dists: Vec<Vec<Option<u32>>> =
            (0..self.num_states).map(|s| self.distances_from(StateId(s))).collect();
        for g in 0..self.num_goals {
            for (s, dist) in dists.iter().enumerate() {
                let (goal, state) = (GoalId(g), StateId(s));
                if self.achieves(goal, state) {
                    continue;
                }
                if matches!(self.goal_distance(dist, goal), Some(d) if d as usize <= self.horizon) {
                    tasks.push((goal, state));
                }
            }
        }
        tasks
    }

    /// Greedy shortest action sequence from `s` to `g` (BFS, lowest action
    /// index first). `None` if unreachable.
    pub fn shortest_path(&self, s: StateId, g: GoalId) -> Option<Vec<ActionId>> {
        if self.achieves(g, s) {
            return Some(Vec::new());
        }
        let n = self.num_states;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut seen = vec![false; n];
        seen[s.0] = true;
        let mut queue = VecDeque::from([s.0]);
        while let Some(x) = queue.pop_front() {
            for a in 0..self.num_actions {
                let y = self.transition[x * self.num_actions + a];
                if seen[y] {
                    continue;
                }
                seen[y] = true;
                parent[y] = Some((x, a));
                if self.achieves(g, StateId(y)) {
                    let mut actions = Vec::new();
                    let mut cur = y;
                    while let Some((p, a)) = parent[cur] {
                        actions.push(ActionId(a));
                        cur = p;
                    }
                    actions.reverse();
                    return Some(actions);
                }
                queue.push_back(y);
            }
        }
        None
    }

    /// GridNav cell index for `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> StateId {
        match self.kind {
            EnvKind::GridNav { width, height } => {
                assert!(row < height && col < width, "cell ({row},{col}) outside grid");
                StateId(row * width + col)
            }
            EnvKind::ChainArith { .. } => panic!("cell() on a non-grid environment"),
        }
    }

    /// Goal "reach cell (row, col)" on GridNav.
    pub fn cell_goal(&self, row: usize, col: usize) -> GoalId {
        GoalId(self.cell(row, col).0)
    }

    /// ChainArith goal whose target is `value`.
    pub fn value_goal(&self, value: u32) -> Option<GoalId> {
        match &self.kind {
            EnvKind::ChainArith { goal_values, .. } => {
                goal_values.iter().position(|&v| v == value).map(GoalId)
            }
            EnvKind::GridNav { .. } => None,
        }
    }

    /// ChainArith action index of `op`.
    pub fn op_action(&self, op: ArithOp) -> Option<ActionId> {
        match &self.kind {
            EnvKind::ChainArith { ops, .. } => ops.iter().position(|&o| o == op).map(ActionId),
            EnvKind::GridNav { .. } => None,
        }
    }
}

fn bfs(transition: &[usize], num_actions: usize, num_states: usize, from: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; num_states];
    dist[from] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(x) = queue.pop_front() {
        let d = dist[x].unwrap();
        for a in 0..num_actions {
            let y = transition[x * num_actions + a];
            if dist[y].is_none() {
                dist[y] = Some(d + 1);
                queue.push_back(y);
            }
        }
    }
    dist
}

/// A sampled episode. `states[0] == start` and `states.len() == actions.len() + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: StateId,
    pub goal: GoalId,
    pub actions: Vec<ActionId>,
    pub states: Vec<StateId>,
    pub reached: bool,
}

impl Trajectory {
    /// Replays `actions` from `start`, stopping early if the goal is reached.
    pub fn replay(env: &Environment, start: StateId, goal: GoalId, actions: &[ActionId]) -> Trajectory {
        let mut states = vec![start];
        let mut taken = Vec::new();
        let mut cur = start;
        for &a in actions {
            if env.achieves(goal, cur) {
                break;
            }
            cur = env.successor(cur, a);
            taken.push(a);
            states.push(cur);
        }
        Trajectory { start, goal, actions: taken, states, reached: env.achieves(goal, cur) }
    }

    pub fn last_state(&self) -> StateId {
        *self.states.last().expect("trajectory has at least its start state")
    }

    /// Checks every structural invariant against `env`.
    pub fn validate(&self, env: &Environment) -> Result<()> {
        let bad = |msg: &str| Err(SegoError::ContractViolation(format!("trajectory: {msg}")));
        if self.states.len() != self.actions.len() + 1 {
            return bad("states/actions length mismatch");
        }
        if self.states[0] != self.start {
            return bad("first state differs from start");
        }
        if self.actions.len() > env.horizon() {
            return bad("longer than the horizon");
        }
        for (t, &a) in self.actions.iter().enumerate() {
            if env.step(self.states[t], a)? != self.states[t + 1] {
                return bad("state sequence inconsistent with transitions");
            }
        }
        if self.reached != env.achieves(self.goal, self.last_state()) {
            return bad("reached flag disagrees with reward");
        }
        Ok(())
    }
}
