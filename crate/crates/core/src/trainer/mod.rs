//! PPO with GAE: multitask meta-training and per-subset fine-tuning.

mod meta;
mod ppo;
mod rollout;

pub use meta::{
    evaluate, finetune, finetune_oracle, init_networks, train_meta, Evaluation, IterMetrics, MetaOutcome, NetConfig,
    OracleOutcome,
};
pub(crate) use meta::check_subset;
pub use ppo::{clipped_objective, ppo_update, Adam, PpoConfig, PpoLearner, PpoMetrics, MAX_LOG_RATIO};
pub use rollout::{collect_rollouts, critic_inputs, gae, Rollout, TransitionRecord};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBudget {
    pub iterations: usize,
    pub steps_per_task: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

/// One iteration by default: the meta-policy is used close to its
/// initialization, where per-task score gradients still disagree.
impl Default for TrainBudget {
    fn default() -> Self {
        TrainBudget {
            iterations: 1,
            steps_per_task: 2048,
            minibatch: 64,
            epochs: 4,
            learning_rate: 3e-4,
        }
    }
}

impl TrainBudget {
    /// Checks positivity. `iterations` may be zero, meaning no training.
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_task == 0 {
            return Err(Error::config("steps_per_task", "must be positive"));
        }
        if self.minibatch == 0 {
            return Err(Error::config("minibatch", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        Ok(())
    }
}
