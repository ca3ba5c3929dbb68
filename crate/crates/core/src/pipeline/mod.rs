//! Run configuration, artifact layout and the end-to-end stages.

mod compare;
mod config;
mod stages;

pub use compare::{calibrated_rel_error, compare, spearman, Calibration, Comparison};
pub use config::{
    AffinityMode, AffinityParams, AnalysisParams, GradexParams, HessianParams, OracleParams, ResolvedSeeds,
    RunConfig, Seeds, TaylorParams,
};
pub use stages::{
    affinity_stage, cluster_stage, estimate_stage, estimation_stages, extract_stage, file, hessian_stage, load_matrix,
    load_meta, load_partition, load_scores, load_stamped_partition, load_store, read_subsets, run_oracle,
    run_pipeline, taylor_csv, taylor_stage, train_stage, write_resolved_config, Artifacts, ClusterFiles,
    FailedSubset, FlopsReport, HessianArtifact, OracleReport, PipelineReport, RelaxationSummary, ScoreList,
    SubsetList, SweepEntry, TaylorTable, ORACLE_CLUSTER, PIPELINE_CLUSTER,
};
