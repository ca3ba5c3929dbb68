use super::{critic_inputs, TrainBudget, TransitionRecord};
use crate::flops::{self, FlopCount};
use crate::linalg::first_non_finite;
use crate::net::PolicyParams;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gae_lambda: 0.95,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config("clip", format!("must lie in (0, 1), got {}", self.clip)));
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return Err(Error::config("value_coef", "coefficients must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("gae_lambda", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Log-ratios beyond this magnitude are clamped before exponentiation.
pub const MAX_LOG_RATIO: f64 = 20.0;

/// Mean of `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_objective(ratios: &[f64], advantages: &[f64], clip: f64) -> f64 {
    assert_eq!(ratios.len(), advantages.len());
    if ratios.is_empty() {
        return 0.0;
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - clip, 1.0 + clip) * a))
        .sum();
    total / ratios.len() as f64
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One descent step on `theta` along `grad`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PpoMetrics {
    /// Full-batch objective before the first epoch.
    pub initial_objective: f64,
    /// Full-batch objective after each epoch.
    pub epoch_objectives: Vec<f64>,
    pub clamped_ratios: usize,
    pub flops: FlopCount,
}

/// Policy and value networks with their optimizer state.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub policy: PolicyParams,
    pub value: PolicyParams,
    policy_opt: Adam,
    value_opt: Adam,
}

struct Evaluated {
    objective: f64,
    policy_grad: Vec<f64>,
    value_grad: Vec<f64>,
    clamped: usize,
}

impl PpoLearner {
    pub fn new(policy: PolicyParams, value: PolicyParams) -> Self {
        let (pd, vd) = (policy.dim(), value.dim());
        PpoLearner {
            policy,
            value,
            policy_opt: Adam::new(pd),
            value_opt: Adam::new(vd),
        }
    }

    /// Objective `L_clip + c2 H - c1 (V - R)^2` averaged over `idx`, and the
    /// gradients that increase it (policy) and decrease the value error.
    fn evaluate(
        &self,
        batch: &[TransitionRecord],
        advantages: &[f64],
        idx: &[usize],
        cfg: &PpoConfig,
        want_grad: bool,
    ) -> Result<Evaluated> {
        let n = idx.len();
        let dim = self.policy.input_dim();
        let n_act = self.policy.output_dim();
        let mut states = Vec::with_capacity(n * dim);
        for &i in idx {
            states.extend_from_slice(&batch[i].state);
        }
        let tasks: Vec<usize> = idx.iter().map(|&i| batch[i].task_id).collect();
        let (acts, logp) = self.policy.log_probs(&states, n)?;
        let v_acts = self.value.forward(&critic_inputs(&self.value, &states, dim, &tasks)?, n)?;
        let values = v_acts.output();

        let inv_n = 1.0 / n as f64;
        let mut d_logits = vec![0.0; n * n_act];
        let mut d_values = vec![0.0; n];
        let mut objective = 0.0;
        let mut clamped = 0;
        for (b, &i) in idx.iter().enumerate() {
            let rec = &batch[i];
            let row = &logp[b * n_act..(b + 1) * n_act];
            let adv = advantages[i];
            let mut log_ratio = row[rec.action] - rec.log_prob_behavior;
            let mut saturated = false;
            if log_ratio.abs() > MAX_LOG_RATIO {
                log_ratio = log_ratio.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
                saturated = true;
                clamped += 1;
            }
            let ratio = log_ratio.exp();
            let surr1 = ratio * adv;
            let surr2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
            let coef = if surr1 <= surr2 && !saturated { surr1 } else { 0.0 };
            let entropy: f64 = -row.iter().map(|lp| lp.exp() * lp).sum::<f64>();
            let err = values[b] - rec.return_to_go;
            objective += surr1.min(surr2) + cfg.entropy_coef * entropy - cfg.value_coef * err * err;

            let d = &mut d_logits[b * n_act..(b + 1) * n_act];
            for (j, lp) in row.iter().enumerate() {
                let pj = lp.exp();
                let indicator = if j == rec.action { 1.0 } else { 0.0 };
                d[j] = inv_n * (coef * (indicator - pj) - cfg.entropy_coef * pj * (lp + entropy));
            }
            d_values[b] = inv_n * 2.0 * cfg.value_coef * err;
        }
        objective *= inv_n;
        if !objective.is_finite() {
            return Err(Error::numeric("ppo objective", 0));
        }
        let (policy_grad, value_grad) = if want_grad {
            let pg = self.policy.backward(&acts, &d_logits)?;
            let vg = self.value.backward(&v_acts, &d_values)?;
            if let Some(k) = first_non_finite(&pg) {
                return Err(Error::numeric("policy gradient", k));
            }
            if let Some(k) = first_non_finite(&vg) {
                return Err(Error::numeric("value gradient", k));
            }
            (pg, vg)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Evaluated {
            objective,
            policy_grad,
            value_grad,
            clamped,
        })
    }

    /// Full-batch objective at the current parameters.
    pub fn objective(&self, batch: &[TransitionRecord], cfg: &PpoConfig) -> Result<f64> {
        let adv = prepared_advantages(batch, cfg);
        let idx: Vec<usize> = (0..batch.len()).collect();
        Ok(self.evaluate(batch, &adv, &idx, cfg, false)?.objective)
    }

    /// Policy-side gradient of the full-batch objective; mostly for tests.
    pub fn objective_gradient(&self, batch: &[TransitionRecord], cfg: &PpoConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let adv = prepared_advantages(batch, cfg);
        let idx: Vec<usize> = (0..batch.len()).collect();
        let e = self.evaluate(batch, &adv, &idx, cfg, true)?;
        Ok((e.policy_grad, e.value_grad))
    }

    /// Epochs of shuffled minibatch ascent on the clipped objective.
    pub fn update(
        &mut self,
        batch: &[TransitionRecord],
        cfg: &PpoConfig,
        budget: &TrainBudget,
        rng: &mut impl rand::Rng,
    ) -> Result<PpoMetrics> {
        if batch.is_empty() {
            return Err(Error::Precondition("ppo_update needs a non-empty batch".into()));
        }
        cfg.validate()?;
        let adv = prepared_advantages(batch, cfg);
        let all: Vec<usize> = (0..batch.len()).collect();
        let per_sample =
            flops::mlp_forward(self.policy.layer_sizes()) + flops::mlp_forward(self.value.layer_sizes());
        let mut metrics = PpoMetrics {
            initial_objective: self.evaluate(batch, &adv, &all, cfg, false)?.objective,
            ..Default::default()
        };
        metrics.flops.add(batch.len() as u64 * per_sample);

        let mut order = all.clone();
        let mb = budget.minibatch.max(1);
        for _ in 0..budget.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(mb) {
                let e = self.evaluate(batch, &adv, chunk, cfg, true)?;
                metrics.clamped_ratios += e.clamped;
                let ascent: Vec<f64> = e.policy_grad.iter().map(|g| -g).collect();
                self.policy_opt
                    .step(self.policy.theta_mut(), &ascent, budget.learning_rate);
                self.value_opt
                    .step(self.value.theta_mut(), &e.value_grad, budget.learning_rate);
                metrics.flops.add(3 * chunk.len() as u64 * per_sample);
            }
            if let Some(k) = first_non_finite(self.policy.theta()) {
                return Err(Error::numeric("policy parameters", k));
            }
            let after = self.evaluate(batch, &adv, &all, cfg, false)?;
            metrics.flops.add(batch.len() as u64 * per_sample);
            metrics.epoch_objectives.push(after.objective);
        }
        Ok(metrics)
    }
}

/// Advantages as used by the update: standardized over the batch when
/// configured, raw otherwise.
fn prepared_advantages(batch: &[TransitionRecord], cfg: &PpoConfig) -> Vec<f64> {
    let raw: Vec<f64> = batch.iter().map(|r| r.advantage).collect();
    if !cfg.normalize_advantages || raw.len() < 2 {
        return raw;
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    raw.iter().map(|a| (a - mean) * scale).collect()
}

/// Functional form of [`PpoLearner::update`] with fresh optimizer state.
pub fn ppo_update(
    policy: PolicyParams,
    value: PolicyParams,
    batch: &[TransitionRecord],
    cfg: &PpoConfig,
    budget: &TrainBudget,
    rng: &mut impl rand::Rng,
) -> Result<(PolicyParams, PolicyParams, PpoMetrics)> {
    let mut learner = PpoLearner::new(policy, value);
    let metrics = learner.update(batch, cfg, budget, rng)?;
    Ok((learner.policy, learner.value, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn clipped_objective_hand_value() {
        let v = clipped_objective(&[1.5, 0.5], &[1.0, 1.0], 0.2);
        assert!((v - 0.85).abs() < 1e-15);
    }

    fn toy_batch(policy: &PolicyParams, seed: u64, n: usize, zero_adv: bool) -> Vec<TransitionRecord> {
        let mut rng = rng_from(seed, &[]);
        (0..n)
            .map(|_| {
                let state = vec![rand::Rng::random_range(&mut rng, -1.0..1.0), rand::Rng::random_range(&mut rng, -1.0..1.0)];
                let (action, lp) = policy.sample_action(&state, &mut rng).unwrap();
                let adv = if zero_adv { 0.0 } else { rand::Rng::random_range(&mut rng, -1.0..1.0) };
                TransitionRecord {
                    task_id: 0,
                    state,
                    action,
                    reward: 0.0,
                    log_prob_behavior: lp - 0.1,
                    advantage: adv,
                    return_to_go: adv,
                }
            })
            .collect()
    }

    fn nets(seed: u64) -> (PolicyParams, PolicyParams) {
        let mut rng = rng_from(seed, &[1]);
        (
            PolicyParams::init(vec![2, 6, 3], &mut rng).unwrap(),
            PolicyParams::init(vec![2, 6, 1], &mut rng).unwrap(),
        )
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (p, v) = nets(0);
        let batch = toy_batch(&p, 1, 100, false);
        let budget = TrainBudget {
            learning_rate: 0.0,
            ..TrainBudget::default()
        };
        let (p2, v2, _) = ppo_update(p.clone(), v.clone(), &batch, &PpoConfig::default(), &budget, &mut rng_from(2, &[])).unwrap();
        assert_eq!(p, p2);
        assert_eq!(v, v2);
    }

    #[test]
    fn constant_objective_leaves_parameters() {
        let (p, v) = nets(3);
        let batch = toy_batch(&p, 4, 100, true);
        let cfg = PpoConfig {
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        let (pg, vg) = PpoLearner::new(p.clone(), v.clone()).objective_gradient(&batch, &cfg).unwrap();
        assert!(pg.iter().chain(&vg).all(|g| *g == 0.0));
        let (p2, _, _) = ppo_update(p.clone(), v, &batch, &cfg, &TrainBudget::default(), &mut rng_from(5, &[])).unwrap();
        for (a, b) in p.theta().iter().zip(p2.theta()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (p, v) = nets(6);
        let batch = toy_batch(&p, 7, 40, false);
        let cfg = PpoConfig::default();
        let learner = PpoLearner::new(p.clone(), v.clone());
        let (pg, vg) = learner.objective_gradient(&batch, &cfg).unwrap();
        let h = 1e-6;
        for k in (0..p.dim()).step_by(3) {
            let mut tp = p.theta().to_vec();
            tp[k] += h;
            let mut tm = p.theta().to_vec();
            tm[k] -= h;
            let fp = PpoLearner::new(p.with_theta(tp).unwrap(), v.clone()).objective(&batch, &cfg).unwrap();
            let fm = PpoLearner::new(p.with_theta(tm).unwrap(), v.clone()).objective(&batch, &cfg).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - pg[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "policy {k}: {fd} vs {}", pg[k]);
        }
        for k in 0..v.dim() {
            let mut tp = v.theta().to_vec();
            tp[k] += h;
            let mut tm = v.theta().to_vec();
            tm[k] -= h;
            let fp = PpoLearner::new(p.clone(), v.with_theta(tp).unwrap()).objective(&batch, &cfg).unwrap();
            let fm = PpoLearner::new(p.clone(), v.with_theta(tm).unwrap()).objective(&batch, &cfg).unwrap();
            // The value gradient descends the error, so it is minus the objective slope.
            let fd = -(fp - fm) / (2.0 * h);
            assert!((fd - vg[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "value {k}: {fd} vs {}", vg[k]);
        }
    }

    #[test]
    fn small_steps_rarely_decrease_the_objective() {
        let mut increases = 0;
        let mut total = 0;
        for seed in 0..10 {
            let (p, v) = nets(100 + seed);
            let batch = toy_batch(&p, 200 + seed, 256, false);
            let budget = TrainBudget {
                learning_rate: 1e-4,
                epochs: 4,
                ..TrainBudget::default()
            };
            let (_, _, m) = ppo_update(p, v, &batch, &PpoConfig::default(), &budget, &mut rng_from(seed, &[])).unwrap();
            let mut prev = m.initial_objective;
            for &o in &m.epoch_objectives {
                total += 1;
                if o >= prev {
                    increases += 1;
                }
                prev = o;
            }
        }
        assert!(increases * 10 >= total * 9, "{increases}/{total}");
    }

    #[test]
    fn huge_log_ratios_are_clamped_and_counted() {
        let (p, v) = nets(9);
        let mut batch = toy_batch(&p, 10, 8, false);
        batch[0].log_prob_behavior = -100.0;
        let (_, _, m) = ppo_update(p, v, &batch, &PpoConfig::default(), &TrainBudget::default(), &mut rng_from(1, &[])).unwrap();
        assert!(m.clamped_ratios >= 1);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (p, v) = nets(0);
        assert!(ppo_update(p, v, &[], &PpoConfig::default(), &TrainBudget::default(), &mut rng_from(0, &[])).is_err());
    }
}
