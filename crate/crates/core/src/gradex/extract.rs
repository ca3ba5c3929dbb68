use super::projection::ProjectionMatrix;
use super::store::{FeatureRecord, GradientStore, StoreHeader};
use crate::envs::TaskSuite;
use crate::flops::{self, FlopCount};
use crate::net::PolicyParams;
use crate::rng::{rng_from, tag};
use crate::trainer::{collect_rollouts, TransitionRecord};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub steps_per_task: usize,
    /// GAE lambda of the exported advantages; 0 gives one-step TD errors.
    pub gae_lambda: f64,
    /// Optional cap on `|advantage|` weights.
    pub max_weight: Option<f64>,
    /// Keep full and double-precision projected gradients next to the store.
    pub debug: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            steps_per_task: 2048,
            gae_lambda: 0.0,
            max_weight: None,
            debug: false,
        }
    }
}

/// Unrounded copies of what went into each stored record.
#[derive(Debug, Clone, Default)]
pub struct DebugGradients {
    /// Row-major `records x p`.
    pub full: Vec<f64>,
    /// Row-major `records x d`.
    pub projected: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub store: GradientStore,
    /// Transitions dropped for a zero advantage.
    pub dropped: usize,
    pub flops: FlopCount,
    pub debug: Option<DebugGradients>,
}

/// Rows of score gradients pushed through the sketch at a time.
const CHUNK: usize = 256;

/// Rolls out the meta-policy on every task and stores the sketched score
/// gradient of each transition with `y = sign(A)` and `w = |A|`.
///
/// The score gradient depends only on the state and action, so each distinct
/// pair is differentiated and projected once.
pub fn extract_features(
    policy: &PolicyParams,
    value: &PolicyParams,
    suite: &TaskSuite,
    projection: &ProjectionMatrix,
    cfg: &ExtractConfig,
    seed: u64,
) -> Result<Extraction> {
    let p = policy.dim();
    if projection.p() != p {
        return Err(Error::Shape {
            expected: p,
            got: projection.p(),
        });
    }
    let rollouts = (0..suite.n_tasks())
        .into_par_iter()
        .map(|task| {
            let mut rng = rng_from(seed, &[tag::EXTRACT, task as u64]);
            collect_rollouts(policy, value, suite, task, cfg.steps_per_task, suite.gamma, cfg.gae_lambda, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut flops = FlopCount::default();
    let mut kept: Vec<TransitionRecord> = Vec::new();
    let mut dropped = 0;
    for r in rollouts {
        flops += r.flops;
        for rec in r.records {
            if rec.advantage == 0.0 {
                dropped += 1;
            } else {
                kept.push(rec);
            }
        }
    }

    // Distinct (state, action) pairs in first-seen order.
    let mut slot_of: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
    let mut unique: Vec<usize> = Vec::new();
    let slots: Vec<usize> = kept
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let key = (rec.state.iter().map(|x| x.to_bits()).collect(), rec.action);
            *slot_of.entry(key).or_insert_with(|| {
                unique.push(i);
                unique.len() - 1
            })
        })
        .collect();

    let d = projection.d();
    let dim = suite.state_dim();
    let chunks: Vec<(Vec<f64>, Option<Vec<f64>>)> = unique
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut states = Vec::with_capacity(chunk.len() * dim);
            let actions: Vec<usize> = chunk.iter().map(|&i| kept[i].action).collect();
            for &i in chunk {
                states.extend_from_slice(&kept[i].state);
            }
            let (_, grads) = policy.grad_log_prob_batch(&states, &actions)?;
            let proj = projection.project_rows(&grads, chunk.len())?;
            Ok((proj, cfg.debug.then_some(grads)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_unique = unique.len() as u64;
    let sizes = policy.layer_sizes();
    flops.add(n_unique * (flops::mlp_forward(sizes) + flops::mlp_backward(sizes) + projection.flops_per_row()));

    let mut projected = Vec::with_capacity(unique.len() * d);
    let mut full = Vec::new();
    for (proj, grads) in chunks {
        projected.extend(proj);
        if let Some(g) = grads {
            full.extend(g);
        }
    }

    let mut records = Vec::with_capacity(kept.len());
    let mut debug = cfg.debug.then(DebugGradients::default);
    for (rec, &slot) in kept.iter().zip(&slots) {
        let row = &projected[slot * d..(slot + 1) * d];
        let mut w = rec.advantage.abs();
        if let Some(cap) = cfg.max_weight {
            w = w.min(cap);
        }
        records.push(FeatureRecord {
            task_id: rec.task_id,
            features: row.iter().map(|&x| x as f32).collect(),
            label: if rec.advantage > 0.0 { 1 } else { -1 },
            weight: w as f32,
        });
        if let Some(dbg) = debug.as_mut() {
            dbg.full.extend_from_slice(&full[slot * p..(slot + 1) * p]);
            dbg.projected.extend_from_slice(row);
        }
    }

    let store = GradientStore {
        header: StoreHeader {
            p,
            d,
            n_tasks: suite.n_tasks(),
            projection_seed: projection.seed(),
            theta_checksum: policy.checksum(),
        },
        records,
    };
    store.validate()?;
    Ok(Extraction {
        store,
        dropped,
        flops,
        debug,
    })
}
