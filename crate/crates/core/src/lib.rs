//! Task-affinity estimation for multitask reinforcement learning.
//!
//! A meta-policy is trained jointly on every task of a suite. Per-transition
//! policy gradients at that meta-policy are projected to a low dimension and
//! reused to score arbitrary task subsets with a weighted logistic surrogate,
//! which stands in for fine-tuning on each subset. Subset scores are folded
//! into an `n x n` affinity matrix and tasks are grouped by a trace-constrained
//! convex relaxation followed by spectral rounding.
//!
//! Module map:
//!
//! * [`net`]: tanh MLPs over a flat parameter vector, exact gradients, HVPs.
//! * [`envs`]: toy task suites that share dynamics and differ in reward.
//! * [`trainer`]: PPO/GAE meta-training and the fine-tuning oracle.
//! * [`gradex`]: projected gradient features and the subset surrogate.
//! * [`affinity`]: affinity matrix, relaxation solver, rounding, NMI.
//! * [`analysis`]: first-order fidelity and Hessian-trace measurements.
//! * [`pipeline`]: run configuration and the end-to-end stages behind the CLI.

pub mod affinity;
pub mod analysis;
pub mod envs;
mod error;
pub mod flops;
pub mod gradex;
pub mod io;
mod linalg;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
