//! Task-affinity matrix, the trace-constrained relaxation over normalized
//! clustering matrices, spectral rounding and partition scoring.

mod matrix;
mod partition;
mod relax;

pub use matrix::{build_affinity, pair_counts, sample_subsets, AffinityMatrix};
pub use partition::{density, nmi, representatives, round_partition, select_k, KSweepPoint, Partition};
pub use relax::{solve_relaxation, RelaxConfig, RelaxMode, RelaxationSolution, Residuals};
