//! Toy multitask suites. Tasks in a suite share observation and action spaces;
//! grid tasks also share the transition function and differ only in the goal
//! cell, cart-pole tasks differ in pole length.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    MultigoalGrid,
    ParamCartpole,
}

/// JSON-facing suite description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub kind: SuiteKind,
    pub n_tasks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    /// Explicit goal cells `[x, y]`; the planted two-cluster layout otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goals: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SuiteConfig {
    /// Eight grid tasks on a 5x5 board, goals in two planted clusters of four.
    pub fn planted_grid() -> Self {
        SuiteConfig {
            kind: SuiteKind::MultigoalGrid,
            n_tasks: 8,
            grid_size: Some(5),
            goals: None,
            lengths: None,
            horizon: None,
            gamma: None,
            seed: 0,
        }
    }

    pub fn cartpole(lengths: Vec<f64>) -> Self {
        SuiteConfig {
            kind: SuiteKind::ParamCartpole,
            n_tasks: lengths.len(),
            grid_size: None,
            goals: None,
            lengths: Some(lengths),
            horizon: None,
            gamma: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Dynamics {
    Grid {
        size: usize,
        start: (usize, usize),
        goals: Vec<(usize, usize)>,
    },
    CartPole {
        lengths: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    kind: SuiteKind,
    dynamics: Dynamics,
    pub horizon: usize,
    pub gamma: f64,
    pub seed: u64,
}

/// Environment state. `terminal` marks a true episode end as opposed to the
/// horizon cutoff; both set `done`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub done: bool,
    pub terminal: bool,
    /// Whether the episode ended by reaching the task's success condition.
    pub success: bool,
    physical: [f64; 4],
}

pub const GRID_ACTIONS: usize = 4;
pub const CARTPOLE_ACTIONS: usize = 2;

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const FORCE: f64 = 10.0;
const DT: f64 = 0.02;
const ANGLE_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
const X_LIMIT: f64 = 2.4;

/// Boundary cells ordered by Manhattan distance from `corner`, ties broken by
/// row then column.
fn boundary_by_distance(size: usize, corner: (usize, usize)) -> Vec<(usize, usize)> {
    let last = size - 1;
    let mut cells: Vec<(usize, usize)> = (0..size)
        .flat_map(|y| (0..size).map(move |x| (x, y)))
        .filter(|&(x, y)| x == 0 || y == 0 || x == last || y == last)
        .collect();
    let dist = |(x, y): (usize, usize)| x.abs_diff(corner.0) + y.abs_diff(corner.1);
    cells.sort_by_key(|&c| (dist(c), c.1.abs_diff(corner.1), c.0.abs_diff(corner.0)));
    cells
}

/// Default goal layout: the first `ceil(n/2)` tasks cluster around the
/// top-left corner and the rest around the bottom-right corner.
pub fn planted_goals(size: usize, n_tasks: usize) -> Vec<(usize, usize)> {
    let first = n_tasks.div_ceil(2);
    let mut goals: Vec<(usize, usize)> = boundary_by_distance(size, (0, 0)).into_iter().take(first).collect();
    let far = boundary_by_distance(size, (size - 1, size - 1));
    for cell in far {
        if goals.len() == n_tasks {
            break;
        }
        if !goals.contains(&cell) {
            goals.push(cell);
        }
    }
    goals
}

/// Ground-truth grouping of the planted layout, as task-id groups.
pub fn planted_groups(n_tasks: usize) -> Vec<Vec<usize>> {
    let first = n_tasks.div_ceil(2);
    vec![(0..first).collect(), (first..n_tasks).collect()]
}

pub fn make_suite(config: &SuiteConfig) -> Result<TaskSuite> {
    if config.n_tasks < 2 {
        return Err(Error::config("n_tasks", "need at least 2 tasks"));
    }
    let gamma = config.gamma.unwrap_or(0.99);
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config("gamma", format!("must lie in (0, 1), got {gamma}")));
    }
    let (dynamics, default_horizon) = match config.kind {
        SuiteKind::MultigoalGrid => {
            let size = config
                .grid_size
                .ok_or_else(|| Error::config("grid_size", "required for multigoal_grid"))?;
            if size < 3 {
                return Err(Error::config("grid_size", format!("must be at least 3, got {size}")));
            }
            let boundary = 4 * (size - 1);
            if config.n_tasks > boundary {
                return Err(Error::config(
                    "n_tasks",
                    format!("{} tasks exceed the {boundary} boundary cells", config.n_tasks),
                ));
            }
            let goals: Vec<(usize, usize)> = match &config.goals {
                Some(g) => g.iter().map(|&[x, y]| (x, y)).collect(),
                None => planted_goals(size, config.n_tasks),
            };
            if goals.len() != config.n_tasks {
                return Err(Error::config(
                    "goals",
                    format!("{} goals for {} tasks", goals.len(), config.n_tasks),
                ));
            }
            let start = (size / 2, size / 2);
            for (i, &g) in goals.iter().enumerate() {
                if g.0 >= size || g.1 >= size {
                    return Err(Error::config("goals", format!("goal {g:?} outside the grid")));
                }
                if g == start {
                    return Err(Error::config("goals", "goal coincides with the start cell"));
                }
                if goals[..i].contains(&g) {
                    return Err(Error::config("goals", format!("duplicate goal {g:?}")));
                }
            }
            (Dynamics::Grid { size, start, goals }, 100)
        }
        SuiteKind::ParamCartpole => {
            let lengths = config
                .lengths
                .clone()
                .ok_or_else(|| Error::config("lengths", "required for param_cartpole"))?;
            if lengths.len() != config.n_tasks {
                return Err(Error::config(
                    "lengths",
                    format!("{} lengths for {} tasks", lengths.len(), config.n_tasks),
                ));
            }
            if let Some(l) = lengths.iter().find(|l| !(0.25..=1.0).contains(*l)) {
                return Err(Error::config("lengths", format!("{l} outside [0.25, 1.0]")));
            }
            (Dynamics::CartPole { lengths }, 200)
        }
    };
    let horizon = config.horizon.unwrap_or(default_horizon);
    if horizon == 0 {
        return Err(Error::config("horizon", "must be positive"));
    }
    Ok(TaskSuite {
        kind: config.kind,
        dynamics,
        horizon,
        gamma,
        seed: config.seed,
    })
}

impl TaskSuite {
    pub fn kind(&self) -> SuiteKind {
        self.kind
    }

    pub fn n_tasks(&self) -> usize {
        match &self.dynamics {
            Dynamics::Grid { goals, .. } => goals.len(),
            Dynamics::CartPole { lengths } => lengths.len(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::Grid { .. } => 2,
            Dynamics::CartPole { .. } => 4,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self.dynamics {
            Dynamics::Grid { .. } => GRID_ACTIONS,
            Dynamics::CartPole { .. } => CARTPOLE_ACTIONS,
        }
    }

    pub fn goal(&self, task: usize) -> Option<(usize, usize)> {
        match &self.dynamics {
            Dynamics::Grid { goals, .. } => goals.get(task).copied(),
            Dynamics::CartPole { .. } => None,
        }
    }

    pub fn pole_length(&self, task: usize) -> Option<f64> {
        match &self.dynamics {
            Dynamics::CartPole { lengths } => lengths.get(task).copied(),
            Dynamics::Grid { .. } => None,
        }
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.n_tasks() {
            return Err(Error::Precondition(format!(
                "task {task} out of range for {} tasks",
                self.n_tasks()
            )));
        }
        Ok(())
    }

    /// Initial state. Grid episodes start at the center cell; cart-pole draws
    /// every coordinate uniformly from `[-0.05, 0.05]`.
    pub fn reset(&self, task: usize, rng: &mut impl rand::Rng) -> Result<EnvState> {
        self.check_task(task)?;
        let physical = match &self.dynamics {
            Dynamics::Grid { start, .. } => [start.0 as f64, start.1 as f64, 0.0, 0.0],
            Dynamics::CartPole { .. } => {
                let mut s = [0.0; 4];
                for v in &mut s {
                    *v = rng.random_range(-0.05..=0.05);
                }
                s
            }
        };
        Ok(self.state_from(physical, 0, false, false, false))
    }

    /// A cart-pole state with explicit `(x, x_dot, angle, angle_dot)`.
    pub fn cartpole_state(&self, physical: [f64; 4]) -> EnvState {
        self.state_from(physical, 0, false, false, false)
    }

    /// A grid state at cell `(x, y)`.
    pub fn grid_state(&self, x: usize, y: usize) -> EnvState {
        self.state_from([x as f64, y as f64, 0.0, 0.0], 0, false, false, false)
    }

    fn state_from(&self, physical: [f64; 4], step_index: usize, done: bool, terminal: bool, success: bool) -> EnvState {
        let observation = match &self.dynamics {
            Dynamics::Grid { size, .. } => {
                let scale = (*size - 1) as f64;
                vec![physical[0] / scale, physical[1] / scale]
            }
            Dynamics::CartPole { .. } => physical.to_vec(),
        };
        EnvState {
            observation,
            step_index,
            done,
            terminal,
            success,
            physical,
        }
    }

    /// Advances one step. Grid actions: 0 up, 1 right, 2 down, 3 left.
    /// Cart-pole actions: 0 push left, 1 push right.
    pub fn step(&self, task: usize, state: &EnvState, action: usize) -> Result<(EnvState, f64)> {
        self.check_task(task)?;
        if state.done {
            return Err(Error::Protocol("step called on a finished episode".into()));
        }
        if action >= self.n_actions() {
            return Err(Error::Precondition(format!(
                "action {action} out of range for {} actions",
                self.n_actions()
            )));
        }
        let step_index = state.step_index + 1;
        let truncated = step_index >= self.horizon;
        match &self.dynamics {
            Dynamics::Grid { size, goals, .. } => {
                let (x, y) = (state.physical[0] as usize, state.physical[1] as usize);
                let last = size - 1;
                let (nx, ny) = match action {
                    0 => (x, y.saturating_sub(1)),
                    1 => ((x + 1).min(last), y),
                    2 => (x, (y + 1).min(last)),
                    _ => (x.saturating_sub(1), y),
                };
                let reached = (nx, ny) == goals[task];
                let reward = if reached { 1.0 } else { -0.01 };
                let next = self.state_from(
                    [nx as f64, ny as f64, 0.0, 0.0],
                    step_index,
                    reached || truncated,
                    reached,
                    reached,
                );
                Ok((next, reward))
            }
            Dynamics::CartPole { lengths } => {
                let physical = cartpole_euler(state.physical, action, lengths[task]);
                let failed = physical[2].abs() > ANGLE_LIMIT || physical[0].abs() > X_LIMIT;
                let reward = if failed { 0.0 } else { 1.0 };
                let survived = truncated && !failed;
                let next = self.state_from(physical, step_index, failed || truncated, failed, survived);
                Ok((next, reward))
            }
        }
    }
}

/// One explicit Euler step of the classic cart-pole equations, where
/// `half_length` is the distance from pivot to the pole's center of mass.
pub fn cartpole_euler(s: [f64; 4], action: usize, half_length: f64) -> [f64; 4] {
    let [x, x_dot, theta, theta_dot] = s;
    let force = if action == 1 { FORCE } else { -FORCE };
    let total_mass = MASS_CART + MASS_POLE;
    let pole_mass_length = MASS_POLE * half_length;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (half_length * (4.0 / 3.0 - MASS_POLE * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
    [
        x + DT * x_dot,
        x_dot + DT * x_acc,
        theta + DT * theta_dot,
        theta_dot + DT * theta_acc,
    ]
}
