//! Sketched gradient features at the meta-policy and the per-subset
//! logistic surrogate that scores task subsets without fine-tuning.

mod extract;
mod projection;
mod store;
mod surrogate;

pub use extract::{extract_features, DebugGradients, ExtractConfig, Extraction};
pub use projection::{make_projection, ProjectionMatrix};
pub use store::{FeatureRecord, GradientStore, StoreHeader, STORE_MAGIC};
pub use surrogate::{
    canonical_subset, estimate_subsets, fit_surrogate, Estimates, Fit, LogisticProblem, SolverConfig, SubsetScore,
};
