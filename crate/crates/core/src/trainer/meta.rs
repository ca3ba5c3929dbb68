use super::{collect_rollouts, PpoConfig, PpoLearner, TrainBudget};
use crate::envs::TaskSuite;
use crate::flops::{self, FlopCount};
use crate::net::PolicyParams;
use crate::rng::{rng_from, tag};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Hidden widths shared by the policy and value networks.
    pub hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { hidden: vec![64; 4] }
    }
}

impl NetConfig {
    pub fn policy_sizes(&self, suite: &TaskSuite) -> Vec<usize> {
        self.sizes(suite.state_dim(), suite.n_actions())
    }

    /// The critic also reads a one-hot task code.
    pub fn value_sizes(&self, suite: &TaskSuite) -> Vec<usize> {
        self.sizes(suite.state_dim() + suite.n_tasks(), 1)
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(input);
        s.extend_from_slice(&self.hidden);
        s.push(output);
        s
    }
}

/// Seeded policy and value initialization for a suite.
pub fn init_networks(suite: &TaskSuite, net: &NetConfig, seed: u64) -> Result<(PolicyParams, PolicyParams)> {
    let mut rng = rng_from(seed, &[tag::INIT]);
    let policy = PolicyParams::init(net.policy_sizes(suite), &mut rng)?;
    let value = PolicyParams::init(net.value_sizes(suite), &mut rng)?;
    Ok((policy, value))
}

/// One line of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub mean_reward_per_task: Vec<f64>,
    pub success_rate_per_task: Vec<f64>,
    pub objective: f64,
    pub clamped_ratios: usize,
    pub flops_cum: u64,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub policy: PolicyParams,
    pub value: PolicyParams,
    pub metrics: Vec<IterMetrics>,
    pub flops: FlopCount,
}

/// PPO iterations on the pooled rollouts of `tasks`, each contributing the
/// same number of steps.
fn run_ppo(
    learner: &mut PpoLearner,
    suite: &TaskSuite,
    tasks: &[usize],
    budget: &TrainBudget,
    cfg: &PpoConfig,
    seed: u64,
    stream: u64,
    mut on_iter: impl FnMut(&IterMetrics),
) -> Result<(Vec<IterMetrics>, FlopCount)> {
    let mut flops = FlopCount::default();
    let mut curve = Vec::with_capacity(budget.iterations);
    for iter in 0..budget.iterations {
        let rollouts = tasks
            .par_iter()
            .map(|&task| {
                let mut rng = rng_from(seed, &[stream, iter as u64, task as u64]);
                collect_rollouts(
                    &learner.policy,
                    &learner.value,
                    suite,
                    task,
                    budget.steps_per_task,
                    suite.gamma,
                    cfg.gae_lambda,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| annotate(e, iter))?;
        let mut batch = Vec::with_capacity(tasks.len() * budget.steps_per_task);
        let mut rewards = Vec::with_capacity(tasks.len());
        let mut successes = Vec::with_capacity(tasks.len());
        for r in rollouts {
            flops += r.flops;
            rewards.push(r.mean_return());
            successes.push(r.success_rate());
            batch.extend(r.records);
        }
        let mut rng = rng_from(seed, &[stream, iter as u64, tag::SHUFFLE]);
        let m = learner
            .update(&batch, cfg, budget, &mut rng)
            .map_err(|e| annotate(e, iter))?;
        flops += m.flops;
        let line = IterMetrics {
            iter,
            mean_reward_per_task: rewards,
            success_rate_per_task: successes,
            objective: m.epoch_objectives.last().copied().unwrap_or(m.initial_objective),
            clamped_ratios: m.clamped_ratios,
            flops_cum: flops.get(),
        };
        log::debug!(
            "iter {iter}: mean reward {:.4}",
            line.mean_reward_per_task.iter().sum::<f64>() / tasks.len() as f64
        );
        on_iter(&line);
        curve.push(line);
    }
    Ok((curve, flops))
}

fn annotate(e: Error, iter: usize) -> Error {
    match e {
        Error::Numeric { what, index } => Error::Numeric {
            what: format!("{what} (iteration {iter})"),
            index,
        },
        other => other,
    }
}

/// Trains a meta-policy on every task of the suite with equal weighting.
/// `on_iter` sees each metrics line as soon as it is produced.
pub fn train_meta(
    suite: &TaskSuite,
    net: &NetConfig,
    budget: &TrainBudget,
    cfg: &PpoConfig,
    seed: u64,
    on_iter: impl FnMut(&IterMetrics),
) -> Result<MetaOutcome> {
    budget.validate()?;
    cfg.validate()?;
    let (policy, value) = init_networks(suite, net, seed)?;
    let mut learner = PpoLearner::new(policy, value);
    let tasks: Vec<usize> = (0..suite.n_tasks()).collect();
    let (metrics, flops) = run_ppo(&mut learner, suite, &tasks, budget, cfg, seed, tag::META, on_iter)?;
    Ok(MetaOutcome {
        policy: learner.policy,
        value: learner.value,
        metrics,
        flops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub per_task_return: Vec<f64>,
    pub per_task_success: Vec<f64>,
    pub mean_return: f64,
    pub success_rate: f64,
    pub flops: FlopCount,
}

/// Monte-Carlo evaluation with sampled actions. Each task draws from its own
/// stream keyed by `(seed, task)`, so different callers evaluating the same
/// task see the same random numbers.
pub fn evaluate(
    policy: &PolicyParams,
    suite: &TaskSuite,
    tasks: &[usize],
    episodes: usize,
    seed: u64,
) -> Result<Evaluation> {
    if tasks.is_empty() || episodes == 0 {
        return Err(Error::Precondition("evaluation needs tasks and episodes".into()));
    }
    let per_task = tasks
        .par_iter()
        .map(|&task| {
            let mut rng = rng_from(seed, &[tag::EVAL, task as u64]);
            let mut total = 0.0;
            let mut wins = 0usize;
            let mut steps = 0u64;
            for _ in 0..episodes {
                let mut state = suite.reset(task, &mut rng)?;
                while !state.done {
                    let (a, _) = policy.sample_action(&state.observation, &mut rng)?;
                    let (next, r) = suite.step(task, &state, a)?;
                    total += r;
                    steps += 1;
                    state = next;
                }
                wins += state.success as usize;
            }
            Ok((total / episodes as f64, wins as f64 / episodes as f64, steps))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = tasks.len() as f64;
    let steps: u64 = per_task.iter().map(|t| t.2).sum();
    Ok(Evaluation {
        per_task_return: per_task.iter().map(|t| t.0).collect(),
        per_task_success: per_task.iter().map(|t| t.1).collect(),
        mean_return: per_task.iter().map(|t| t.0).sum::<f64>() / n,
        success_rate: per_task.iter().map(|t| t.1).sum::<f64>() / n,
        flops: FlopCount(steps * flops::mlp_forward(policy.layer_sizes())),
    })
}

#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub policy: PolicyParams,
    pub value: PolicyParams,
    pub evaluation: Evaluation,
    pub flops: FlopCount,
}

impl OracleOutcome {
    pub fn mean_reward(&self) -> f64 {
        self.evaluation.mean_return
    }
}

pub(crate) fn check_subset(subset: &[usize], n_tasks: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::Precondition("subset must be non-empty".into()));
    }
    for (i, &t) in subset.iter().enumerate() {
        if t >= n_tasks {
            return Err(Error::Precondition(format!("task {t} out of range for {n_tasks} tasks")));
        }
        if subset[..i].contains(&t) {
            return Err(Error::Precondition(format!("task {t} repeated in subset")));
        }
    }
    Ok(())
}

/// Fine-tunes from the meta-policy on `subset` only and evaluates the result
/// on the same tasks. The returned FLOPs include the evaluation episodes.
#[allow(clippy::too_many_arguments)]
pub fn finetune_oracle(
    policy: &PolicyParams,
    value: &PolicyParams,
    suite: &TaskSuite,
    subset: &[usize],
    budget: &TrainBudget,
    cfg: &PpoConfig,
    eval_episodes: usize,
    seed: u64,
) -> Result<OracleOutcome> {
    let (policy, value, mut flops) = finetune(policy, value, suite, subset, budget, cfg, seed)?;
    let evaluation = evaluate(&policy, suite, subset, eval_episodes, seed)?;
    flops += evaluation.flops;
    Ok(OracleOutcome {
        policy,
        value,
        evaluation,
        flops,
    })
}

/// Fine-tunes from the meta-policy on `subset` only. Task order in `subset`
/// does not matter.
pub fn finetune(
    policy: &PolicyParams,
    value: &PolicyParams,
    suite: &TaskSuite,
    subset: &[usize],
    budget: &TrainBudget,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(PolicyParams, PolicyParams, FlopCount)> {
    check_subset(subset, suite.n_tasks())?;
    budget.validate()?;
    cfg.validate()?;
    let mut tasks = subset.to_vec();
    tasks.sort_unstable();
    let mut learner = PpoLearner::new(policy.clone(), value.clone());
    let (_, flops) = run_ppo(&mut learner, suite, &tasks, budget, cfg, seed, tag::ORACLE, |_| {})?;
    Ok((learner.policy, learner.value, flops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_suite, SuiteConfig};

    fn tiny() -> (TaskSuite, NetConfig, TrainBudget) {
        let suite = make_suite(&SuiteConfig::planted_grid()).unwrap();
        let net = NetConfig { hidden: vec![16, 16] };
        let budget = TrainBudget {
            iterations: 2,
            steps_per_task: 64,
            ..TrainBudget::default()
        };
        (suite, net, budget)
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let (suite, net, budget) = tiny();
        let budget = TrainBudget { iterations: 0, ..budget };
        let out = train_meta(&suite, &net, &budget, &PpoConfig::default(), 5, |_| {}).unwrap();
        let (p, v) = init_networks(&suite, &net, 5).unwrap();
        assert_eq!(out.policy, p);
        assert_eq!(out.value, v);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn meta_training_is_deterministic() {
        let (suite, net, budget) = tiny();
        let a = train_meta(&suite, &net, &budget, &PpoConfig::default(), 11, |_| {}).unwrap();
        let b = train_meta(&suite, &net, &budget, &PpoConfig::default(), 11, |_| {}).unwrap();
        assert_eq!(a.policy.theta(), b.policy.theta());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 2);
        assert_eq!(a.metrics[1].mean_reward_per_task.len(), 8);
        assert!(a.metrics[1].flops_cum > a.metrics[0].flops_cum);
    }

    #[test]
    fn no_op_oracle_matches_plain_evaluation() {
        let (suite, net, _) = tiny();
        let (p, v) = init_networks(&suite, &net, 1).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let budget = TrainBudget {
            iterations: 0,
            ..TrainBudget::default()
        };
        let out = finetune_oracle(&p, &v, &suite, &all, &budget, &PpoConfig::default(), 3, 9).unwrap();
        let eval = evaluate(&p, &suite, &all, 3, 9).unwrap();
        assert_eq!(out.mean_reward(), eval.mean_return);
        assert_eq!(out.policy, p);
    }

    #[test]
    fn empty_subset_is_rejected() {
        let (suite, net, budget) = tiny();
        let (p, v) = init_networks(&suite, &net, 1).unwrap();
        let err = finetune_oracle(&p, &v, &suite, &[], &budget, &PpoConfig::default(), 1, 0).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }
}
