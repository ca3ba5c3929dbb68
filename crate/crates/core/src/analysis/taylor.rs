use crate::envs::TaskSuite;
use crate::linalg::{dot, norm2};
use crate::net::PolicyParams;
use crate::rng::{rng_from, tag};
use crate::trainer::{collect_rollouts, finetune, PpoConfig, TrainBudget};
use crate::{Error, Result};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Samples whose log-probability is closer to zero than this are left out of
/// the relative error.
pub const MIN_LOG_PROB: f64 = 1e-12;

/// A parametric log-likelihood over a fixed batch of samples.
pub trait LogProbModel: Sync {
    fn dim(&self) -> usize;
    fn log_probs(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// Log-probabilities at `theta` and the directional derivative of each
    /// along `direction`.
    fn directional(&self, theta: &[f64], direction: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// State/action pairs evaluated under a policy network layout.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    pub layer_sizes: Vec<usize>,
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
}

impl PolicyBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn net(&self, theta: &[f64]) -> Result<PolicyParams> {
        PolicyParams::new(self.layer_sizes.clone(), theta.to_vec())
    }

    pub(crate) fn state_dim(&self) -> usize {
        self.layer_sizes[0]
    }
}

const CHUNK: usize = 256;

impl LogProbModel for PolicyBatch {
    fn dim(&self) -> usize {
        PolicyParams::count(&self.layer_sizes)
    }

    fn log_probs(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let net = self.net(theta)?;
        let (_, logp) = net.log_probs(&self.states, self.len())?;
        let k = net.output_dim();
        Ok(self.actions.iter().enumerate().map(|(b, &a)| logp[b * k + a]).collect())
    }

    fn directional(&self, theta: &[f64], direction: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let net = self.net(theta)?;
        let p = net.dim();
        let sd = self.state_dim();
        let parts = self
            .actions
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, actions)| {
                let states = &self.states[c * CHUNK * sd..(c * CHUNK + actions.len()) * sd];
                let (logp, grads) = net.grad_log_prob_batch(states, actions)?;
                let dd: Vec<f64> = grads.chunks_exact(p).map(|g| dot(g, direction)).collect();
                Ok((logp, dd))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut logp = Vec::with_capacity(self.len());
        let mut dd = Vec::with_capacity(self.len());
        for (l, d) in parts {
            logp.extend(l);
            dd.extend(d);
        }
        Ok((logp, dd))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub rel_distance: f64,
    pub mean_rss: f64,
    pub std_rss: f64,
    pub samples: usize,
    pub excluded: usize,
}

/// Per-sample relative residual of the first-order expansion of the
/// log-likelihood at `theta_star`, evaluated at `theta`.
pub fn taylor_rss<M: LogProbModel + ?Sized>(model: &M, theta_star: &[f64], theta: &[f64]) -> Result<TaylorReport> {
    let p = model.dim();
    if theta_star.len() != p || theta.len() != p {
        return Err(Error::Shape {
            expected: p,
            got: if theta.len() != p { theta.len() } else { theta_star.len() },
        });
    }
    let delta: Vec<f64> = theta.iter().zip(theta_star).map(|(a, b)| a - b).collect();
    let (base, slope) = model.directional(theta_star, &delta)?;
    if base.is_empty() {
        return Err(Error::Precondition("evaluation batch is empty".into()));
    }
    let moved = model.log_probs(theta)?;
    let mut rss = Vec::with_capacity(base.len());
    for ((&lp, &lp0), &g) in moved.iter().zip(&base).zip(&slope) {
        if lp.abs() < MIN_LOG_PROB {
            continue;
        }
        let r = lp - lp0 - g;
        rss.push(r * r / (lp * lp));
    }
    let excluded = base.len() - rss.len();
    let (mean_rss, std_rss) = mean_std(&rss);
    let scale = norm2(theta_star);
    Ok(TaylorReport {
        rel_distance: if scale > 0.0 { norm2(&delta) / scale } else { 0.0 },
        mean_rss,
        std_rss,
        samples: rss.len(),
        excluded,
    })
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `theta_star + r |theta_star| direction / |direction|`.
pub fn perturb(theta_star: &[f64], direction: &[f64], rel_distance: f64) -> Result<Vec<f64>> {
    let dn = norm2(direction);
    if direction.len() != theta_star.len() {
        return Err(Error::Shape {
            expected: theta_star.len(),
            got: direction.len(),
        });
    }
    if dn == 0.0 {
        if rel_distance == 0.0 {
            return Ok(theta_star.to_vec());
        }
        return Err(Error::Precondition("perturbation direction is zero".into()));
    }
    let step = rel_distance * norm2(theta_star) / dn;
    Ok(theta_star.iter().zip(direction).map(|(t, d)| t + step * d).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    Isotropic,
    #[default]
    Finetune,
}

/// Gaussian directions, one per seed.
pub fn isotropic_directions(dim: usize, seeds: &[u64]) -> Vec<Vec<f64>> {
    seeds
        .iter()
        .map(|&s| {
            let mut rng = rng_from(s, &[tag::TAYLOR, 0]);
            (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect()
}

/// Parameter displacement after a short fine-tune on a random subset of
/// `subset_size` tasks, one per seed.
#[allow(clippy::too_many_arguments)]
pub fn finetune_directions(
    policy: &PolicyParams,
    value: &PolicyParams,
    suite: &TaskSuite,
    subset_size: usize,
    budget: &TrainBudget,
    cfg: &PpoConfig,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    if subset_size == 0 || subset_size > suite.n_tasks() {
        return Err(Error::Precondition(format!(
            "subset size {subset_size} outside 1..={}",
            suite.n_tasks()
        )));
    }
    seeds
        .iter()
        .map(|&s| {
            let mut rng = rng_from(s, &[tag::TAYLOR, 1]);
            let subset = sample(&mut rng, suite.n_tasks(), subset_size).into_vec();
            let (tuned, _, _) = finetune(policy, value, suite, &subset, budget, cfg, s)?;
            Ok(tuned.theta().iter().zip(policy.theta()).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// State/action pairs visited by `policy` on every task.
pub fn eval_batch(
    policy: &PolicyParams,
    value: &PolicyParams,
    suite: &TaskSuite,
    steps_per_task: usize,
    seed: u64,
) -> Result<PolicyBatch> {
    let mut batch = PolicyBatch {
        layer_sizes: policy.layer_sizes().to_vec(),
        states: Vec::new(),
        actions: Vec::new(),
    };
    for task in 0..suite.n_tasks() {
        let mut rng = rng_from(seed, &[tag::TAYLOR, 2, task as u64]);
        let roll = collect_rollouts(policy, value, suite, task, steps_per_task, suite.gamma, 0.95, &mut rng)?;
        for r in roll.records {
            batch.states.extend(r.state);
            batch.actions.push(r.action);
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorRow {
    pub target_distance: f64,
    pub direction: usize,
    pub report: TaylorReport,
}

/// One report per (target distance, direction).
pub fn taylor_scan<M: LogProbModel + ?Sized>(
    model: &M,
    theta_star: &[f64],
    distances: &[f64],
    directions: &[Vec<f64>],
) -> Result<Vec<TaylorRow>> {
    let mut rows = Vec::with_capacity(distances.len() * directions.len());
    for &r in distances {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::config("distances", format!("{r} is not a non-negative distance")));
        }
        for (i, d) in directions.iter().enumerate() {
            let theta = perturb(theta_star, d, r)?;
            rows.push(TaylorRow {
                target_distance: r,
                direction: i,
                report: taylor_rss(model, theta_star, &theta)?,
            });
        }
    }
    Ok(rows)
}

/// Relative parameter distance reached by fine-tuning on each subset.
pub fn adapted_distance_scan(
    policy: &PolicyParams,
    value: &PolicyParams,
    suite: &TaskSuite,
    subsets: &[Vec<usize>],
    budget: &TrainBudget,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let scale = norm2(policy.theta());
    subsets
        .iter()
        .map(|s| {
            let (tuned, _, _) = finetune(policy, value, suite, s, budget, cfg, seed)?;
            let diff: Vec<f64> = tuned.theta().iter().zip(policy.theta()).map(|(a, b)| a - b).collect();
            let d = if scale > 0.0 { norm2(&diff) / scale } else { 0.0 };
            Ok((s.clone(), d))
        })
        .collect()
}
