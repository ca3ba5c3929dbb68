//! First-order fidelity of the log-likelihood around the meta-policy, and
//! Hessian-trace measurements of the policy-gradient loss.

mod hessian;
mod taylor;

pub use hessian::{
    bound_value, complexity_term, estimate_trace, generalization_report, hutch_pp, hutchinson, top_eigenvalue,
    GeneralizationConfig, HessianReport, PgLoss, TraceEstimate, TraceMethod,
};
pub use taylor::{
    adapted_distance_scan, eval_batch, finetune_directions, isotropic_directions, perturb, taylor_rss, taylor_scan,
    DirectionMode, LogProbModel, PolicyBatch, TaylorReport, TaylorRow, MIN_LOG_PROB,
};
