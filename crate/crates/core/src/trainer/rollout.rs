use crate::envs::TaskSuite;
use crate::flops::{self, FlopCount};
use crate::linalg::first_non_finite;
use crate::net::PolicyParams;
use crate::{Error, Result};

/// One environment step with its advantage estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub task_id: usize,
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub log_prob_behavior: f64,
    pub advantage: f64,
    pub return_to_go: f64,
}

/// Records from one task plus statistics of the episodes finished on the way.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub records: Vec<TransitionRecord>,
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
    pub flops: FlopCount,
}

impl Rollout {
    /// Mean undiscounted return over finished episodes; 0 when none finished.
    pub fn mean_return(&self) -> f64 {
        if self.episode_returns.is_empty() {
            return 0.0;
        }
        self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64
    }

    pub fn success_rate(&self) -> f64 {
        if self.episode_successes.is_empty() {
            return 0.0;
        }
        self.episode_successes.iter().filter(|&&s| s).count() as f64 / self.episode_successes.len() as f64
    }
}

/// Generalized advantage estimation over a flat step sequence.
///
/// `next_values[t]` is the value of the state reached at step `t`, already
/// zero when that state is terminal. `boundary[t]` marks the last step of an
/// episode segment, truncated or not, so the recursion does not leak across
/// episodes. Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    boundary: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && next_values.len() == n && boundary.len() == n);
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if boundary[t] {
            running = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Value-network inputs: each state row followed by a one-hot task code when
/// the network is wider than the state. The policy never sees the task.
pub fn critic_inputs(value: &PolicyParams, states: &[f64], state_dim: usize, tasks: &[usize]) -> Result<Vec<f64>> {
    let width = value.input_dim();
    if width < state_dim || states.len() != tasks.len() * state_dim {
        return Err(Error::Shape {
            expected: tasks.len() * state_dim,
            got: states.len(),
        });
    }
    let code = width - state_dim;
    if code == 0 {
        return Ok(states.to_vec());
    }
    let mut out = vec![0.0; tasks.len() * width];
    for (b, (row, &task)) in out.chunks_exact_mut(width).zip(tasks).enumerate() {
        if task >= code {
            return Err(Error::Precondition(format!("task {task} outside the critic's {code}-task code")));
        }
        row[..state_dim].copy_from_slice(&states[b * state_dim..(b + 1) * state_dim]);
        row[state_dim + task] = 1.0;
    }
    Ok(out)
}

/// Runs `policy` on one task for exactly `n_steps` steps, resetting after
/// each finished episode, and attaches GAE advantages from `value`.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &PolicyParams,
    value: &PolicyParams,
    suite: &TaskSuite,
    task_id: usize,
    n_steps: usize,
    gamma: f64,
    gae_lambda: f64,
    rng: &mut impl rand::Rng,
) -> Result<Rollout> {
    if n_steps == 0 {
        return Err(Error::Precondition("n_steps must be at least 1".into()));
    }
    let dim = suite.state_dim();
    if policy.input_dim() != dim || value.input_dim() < dim {
        return Err(Error::Shape {
            expected: dim,
            got: policy.input_dim(),
        });
    }

    let mut states = Vec::with_capacity(n_steps * dim);
    // States reached after each step, only needed where bootstrapping applies.
    let mut next_states = Vec::with_capacity(n_steps * dim);
    let mut actions = Vec::with_capacity(n_steps);
    let mut log_probs = Vec::with_capacity(n_steps);
    let mut rewards = Vec::with_capacity(n_steps);
    let mut terminal = Vec::with_capacity(n_steps);
    let mut boundary = Vec::with_capacity(n_steps);
    let mut out = Rollout::default();

    let mut state = suite.reset(task_id, rng)?;
    let mut episode_return = 0.0;
    for t in 0..n_steps {
        let (action, logp) = policy.sample_action(&state.observation, rng)?;
        let (next, reward) = suite.step(task_id, &state, action)?;
        states.extend_from_slice(&state.observation);
        next_states.extend_from_slice(&next.observation);
        actions.push(action);
        log_probs.push(logp);
        rewards.push(reward);
        terminal.push(next.terminal);
        boundary.push(next.done || t + 1 == n_steps);
        episode_return += reward;
        if next.done {
            out.episode_returns.push(episode_return);
            out.episode_successes.push(next.success);
            episode_return = 0.0;
            state = suite.reset(task_id, rng)?;
        } else {
            state = next;
        }
    }

    let task_ids = vec![task_id; n_steps];
    let values = value.values(&critic_inputs(value, &states, dim, &task_ids)?, n_steps)?;
    let mut next_values = value.values(&critic_inputs(value, &next_states, dim, &task_ids)?, n_steps)?;
    for (nv, &term) in next_values.iter_mut().zip(&terminal) {
        if term {
            *nv = 0.0;
        }
    }
    let (adv, returns) = gae(&rewards, &values, &next_values, &boundary, gamma, gae_lambda);
    if let Some(i) = first_non_finite(&adv) {
        return Err(Error::numeric("advantage", i));
    }

    let sizes_p = policy.layer_sizes();
    let sizes_v = value.layer_sizes();
    out.flops.add(n_steps as u64 * (flops::mlp_forward(sizes_p) + 2 * flops::mlp_forward(sizes_v)));

    out.records = (0..n_steps)
        .map(|t| TransitionRecord {
            task_id,
            state: states[t * dim..(t + 1) * dim].to_vec(),
            action: actions[t],
            reward: rewards[t],
            log_prob_behavior: log_probs[t],
            advantage: adv[t],
            return_to_go: returns[t],
        })
        .collect();
    Ok(out)
}
