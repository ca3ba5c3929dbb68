use super::compare::{compare, Comparison};
use super::config::{AffinityMode, RunConfig};
use crate::affinity::{
    build_affinity, round_partition, sample_subsets, select_k, solve_relaxation, AffinityMatrix, KSweepPoint,
    Partition, RelaxMode, RelaxationSolution, Residuals,
};
use crate::analysis::{
    eval_batch, finetune_directions, generalization_report, isotropic_directions, taylor_scan, top_eigenvalue,
    DirectionMode, HessianReport, PgLoss, PolicyBatch, TaylorRow,
};
use crate::envs::TaskSuite;
use crate::flops::FlopCount;
use crate::gradex::{estimate_subsets, extract_features, make_projection, Extraction, GradientStore, SubsetScore};
use crate::io::{self, Stamped};
use crate::net::PolicyParams;
use crate::rng::{rng_from, tag};
use crate::trainer::{collect_rollouts, finetune, finetune_oracle, train_meta, MetaOutcome};
use crate::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub mod file {
    pub const RESOLVED_CONFIG: &str = "resolved-config.json";
    pub const THETA: &str = "theta_star.bin";
    pub const VALUE: &str = "value_star.bin";
    pub const METRICS: &str = "metrics.jsonl";
    pub const STORE: &str = "store.gxs";
    pub const SUBSETS: &str = "subsets.json";
    pub const SCORES: &str = "scores.json";
    pub const AFFINITY: &str = "U.csv";
    pub const RELAXED: &str = "X.csv";
    pub const RELAXATION: &str = "relaxation.json";
    pub const PARTITION: &str = "partition.json";
    pub const FLOPS: &str = "flops.json";
    pub const ORACLE_SCORES: &str = "oracle_scores.json";
    pub const ORACLE_AFFINITY: &str = "U_oracle.csv";
    pub const ORACLE_RELAXED: &str = "X_oracle.csv";
    pub const ORACLE_RELAXATION: &str = "relaxation_oracle.json";
    pub const ORACLE_PARTITION: &str = "partition_oracle.json";
    pub const COMPARISON: &str = "comparison.json";
    pub const TAYLOR_CSV: &str = "taylor.csv";
    pub const TAYLOR_JSON: &str = "taylor.json";
    pub const HESSIAN: &str = "hessian.json";
}

/// An output directory and the files in it.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }
}

/// Cumulative FLOPs per stage for one meta-policy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub meta: u64,
    pub extract: u64,
    pub estimate: u64,
    /// `extract + estimate`.
    pub pipeline: u64,
    pub oracle: Option<u64>,
    /// `oracle / pipeline`.
    pub ratio: Option<f64>,
}

impl FlopsReport {
    fn finish(&mut self) {
        self.pipeline = self.extract + self.estimate;
        self.ratio = match self.oracle {
            Some(o) if self.pipeline > 0 => Some(o as f64 / self.pipeline as f64),
            _ => None,
        };
    }
}

fn update_flops(art: &Artifacts, checksum: [u8; 8], edit: impl FnOnce(&mut FlopsReport)) -> Result<FlopsReport> {
    let path = art.path(file::FLOPS);
    let mut report = if path.exists() {
        io::read_json::<Stamped<FlopsReport>>(&path)?
            .checked(&path, checksum)
            .unwrap_or_default()
    } else {
        FlopsReport::default()
    };
    edit(&mut report);
    report.finish();
    io::write_json(&path, &Stamped::new(checksum, report.clone()))?;
    Ok(report)
}

pub fn write_resolved_config(cfg: &RunConfig, art: &Artifacts) -> Result<()> {
    io::write_json(&art.path(file::RESOLVED_CONFIG), &cfg.resolved())
}

pub fn train_stage(cfg: &RunConfig, suite: &TaskSuite, art: &Artifacts) -> Result<MetaOutcome> {
    let seeds = cfg.seeds();
    let mut lines = String::new();
    let out = train_meta(suite, &cfg.net, &cfg.train, &cfg.ppo, seeds.meta, |m| {
        log::info!(
            "meta iter {}: success {:.3}",
            m.iter,
            m.success_rate_per_task.iter().sum::<f64>() / m.success_rate_per_task.len() as f64
        );
        lines.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        lines.push('\n');
    })?;
    out.policy.save(&art.path(file::THETA))?;
    out.value.save(&art.path(file::VALUE))?;
    io::write_text(&art.path(file::METRICS), &lines)?;
    let meta = out.flops.get();
    let checksum = out.policy.checksum();
    // A fresh meta-policy invalidates earlier counts.
    let path = art.path(file::FLOPS);
    let mut report = FlopsReport {
        meta,
        ..FlopsReport::default()
    };
    report.finish();
    io::write_json(&path, &Stamped::new(checksum, report))?;
    Ok(out)
}

/// The saved meta-policy and value network.
pub fn load_meta(art: &Artifacts) -> Result<(PolicyParams, PolicyParams)> {
    let path = art.path(file::THETA);
    if !path.exists() {
        return Err(Error::Precondition(format!(
            "no meta-policy checkpoint at {}; run `gradex train` first",
            path.display()
        )));
    }
    let policy = PolicyParams::load(&path)?;
    let value = PolicyParams::load(&art.path(file::VALUE))?;
    Ok((policy, value))
}

pub fn extract_stage(
    cfg: &RunConfig,
    suite: &TaskSuite,
    art: &Artifacts,
    policy: &PolicyParams,
    value: &PolicyParams,
) -> Result<Extraction> {
    let seeds = cfg.seeds();
    let projection = make_projection(policy.dim(), cfg.gradex.projection_dim, seeds.projection)?;
    let ex = extract_features(policy, value, suite, &projection, &cfg.gradex.extract, seeds.extract)?;
    if ex.dropped > 0 {
        log::info!("dropped {} zero-advantage transitions", ex.dropped);
    }
    ex.store.save(&art.path(file::STORE))?;
    let f = ex.flops.get();
    update_flops(art, policy.checksum(), |r| r.extract = f)?;
    Ok(ex)
}

pub fn load_store(art: &Artifacts, checksum: [u8; 8]) -> Result<GradientStore> {
    let path = art.path(file::STORE);
    if !path.exists() {
        return Err(Error::Precondition(format!(
            "no gradient store at {}; run `gradex extract` first",
            path.display()
        )));
    }
    let store = GradientStore::load(&path)?;
    store.ensure_checksum(checksum, &path)?;
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetList {
    pub subsets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSubset {
    pub subset: Vec<usize>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreList {
    pub scores: Vec<SubsetScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<FailedSubset>,
}

/// Reads a subsets file: either a stamped pipeline artifact or a bare list.
pub fn read_subsets(path: &Path, checksum: [u8; 8]) -> Result<Vec<Vec<usize>>> {
    let text = io::read_text(path)?;
    let subsets = match serde_json::from_str::<Stamped<SubsetList>>(&text) {
        Ok(s) => s.checked(path, checksum)?.subsets,
        Err(_) => serde_json::from_str::<Vec<Vec<usize>>>(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
    };
    if subsets.is_empty() {
        return Err(Error::Precondition(format!("{} lists no subsets", path.display())));
    }
    Ok(subsets)
}

pub fn estimate_stage(cfg: &RunConfig, art: &Artifacts, store: &GradientStore) -> Result<Vec<SubsetScore>> {
    let seeds = cfg.seeds();
    let checksum = store.header.theta_checksum;
    let n = store.header.n_tasks;
    let subsets = sample_subsets(n, cfg.gradex.subsets, cfg.subset_size(), seeds.subsets)?;
    io::write_json(
        &art.path(file::SUBSETS),
        &Stamped::new(checksum, SubsetList { subsets: subsets.clone() }),
    )?;
    let est = estimate_subsets(store, &subsets, &cfg.gradex.solver);
    let mut scores = Vec::new();
    let mut failed = Vec::new();
    for (s, r) in subsets.iter().zip(est.results) {
        match r {
            Ok(score) => scores.push(score),
            Err(e) => {
                log::warn!("subset {s:?} failed: {e}");
                failed.push(FailedSubset {
                    subset: s.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    io::write_json(
        &art.path(file::SCORES),
        &Stamped::new(
            checksum,
            ScoreList {
                scores: scores.clone(),
                failed,
            },
        ),
    )?;
    if scores.is_empty() {
        return Err(Error::Precondition("every subset fit failed".into()));
    }
    let f = est.flops.get();
    update_flops(art, checksum, |r| r.estimate = f)?;
    Ok(scores)
}

pub fn load_scores(art: &Artifacts, name: &str, checksum: [u8; 8]) -> Result<Vec<SubsetScore>> {
    let path = art.path(name);
    Ok(io::read_json::<Stamped<ScoreList>>(&path)?.checked(&path, checksum)?.scores)
}

pub fn affinity_stage(
    art: &Artifacts,
    name: &str,
    scores: &[(Vec<usize>, f64)],
    n: usize,
    checksum: [u8; 8],
) -> Result<AffinityMatrix> {
    let u = build_affinity(scores, n)?;
    if u.missing_pairs() > 0 {
        log::warn!("{} task pairs imputed with the mean score", u.missing_pairs());
    }
    io::write_matrix_csv(&art.path(name), &u.values, Some(checksum))?;
    Ok(u)
}

pub fn load_matrix(art: &Artifacts, name: &str, checksum: [u8; 8]) -> Result<DMatrix<f64>> {
    let path = art.path(name);
    let (m, found) = io::read_matrix_csv(&path)?;
    match found {
        Some(f) => io::ensure_checksum(&path, checksum, f)?,
        None => return Err(Error::Format(format!("{} has no theta checksum", path.display()))),
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxationSummary {
    pub mode: AffinityMode,
    pub k: usize,
    pub objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
    pub converged: bool,
    pub effective_k: usize,
    pub density: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub k: usize,
    pub density: f64,
}

/// Output names for one clustering run.
#[derive(Debug, Clone, Copy)]
pub struct ClusterFiles {
    pub relaxed: &'static str,
    pub summary: &'static str,
    pub partition: &'static str,
}

pub const PIPELINE_CLUSTER: ClusterFiles = ClusterFiles {
    relaxed: file::RELAXED,
    summary: file::RELAXATION,
    partition: file::PARTITION,
};

pub const ORACLE_CLUSTER: ClusterFiles = ClusterFiles {
    relaxed: file::ORACLE_RELAXED,
    summary: file::ORACLE_RELAXATION,
    partition: file::ORACLE_PARTITION,
};

pub fn cluster_stage(
    cfg: &RunConfig,
    art: &Artifacts,
    u: &DMatrix<f64>,
    checksum: [u8; 8],
    files: ClusterFiles,
) -> Result<(RelaxationSolution, Partition)> {
    let seed = cfg.seeds().rounding;
    let relax = &cfg.affinity.relax;
    let (k, sol, sweep) = match &cfg.affinity.mode {
        AffinityMode::FixedK { k } => (*k, solve_relaxation(u, RelaxMode::FixedK(*k), relax)?, Vec::new()),
        AffinityMode::Auto { lambda } => {
            let sol = solve_relaxation(u, RelaxMode::Auto(*lambda), relax)?;
            (sol.effective_k.max(1), sol, Vec::new())
        }
        AffinityMode::SelectK { ks } => {
            let (k, points) = select_k(u, ks, relax, seed)?;
            let sweep = points
                .iter()
                .map(|p: &KSweepPoint| SweepEntry {
                    k: p.k,
                    density: p.density,
                })
                .collect();
            (k, solve_relaxation(u, RelaxMode::FixedK(k), relax)?, sweep)
        }
    };
    if !sol.converged {
        log::warn!("relaxation stopped at the iteration cap, residuals {:?}", sol.residuals);
    }
    let partition = round_partition(&sol.x, k, u, seed)?;
    io::write_matrix_csv(&art.path(files.relaxed), &sol.x, Some(checksum))?;
    let summary = RelaxationSummary {
        mode: cfg.affinity.mode.clone(),
        k,
        objective: sol.objective,
        residuals: sol.residuals,
        iterations: sol.iterations,
        converged: sol.converged,
        effective_k: sol.effective_k,
        density: crate::affinity::density(u, &partition),
        sweep,
    };
    io::write_json(&art.path(files.summary), &Stamped::new(checksum, summary))?;
    io::write_json(&art.path(files.partition), &Stamped::new(checksum, partition.clone()))?;
    Ok((sol, partition))
}

pub fn load_partition(path: &Path) -> Result<Partition> {
    let text = io::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn score_pairs(scores: &[SubsetScore]) -> Vec<(Vec<usize>, f64)> {
    scores.iter().map(|s| (s.subset.clone(), s.score)).collect()
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub checksum: [u8; 8],
    pub meta: MetaOutcome,
    pub scores: Vec<SubsetScore>,
    pub affinity: AffinityMatrix,
    pub relaxation: RelaxationSolution,
    pub partition: Partition,
    pub flops: FlopsReport,
}

/// Meta-training followed by the estimation stages.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineReport> {
    let suite = cfg.validate()?;
    let art = Artifacts::new(out);
    write_resolved_config(cfg, &art)?;
    let meta = train_stage(cfg, &suite, &art).map_err(|e| e.in_stage("train"))?;
    let (checksum, scores, affinity, relaxation, partition) =
        estimation_stages(cfg, &suite, &art, &meta.policy, &meta.value)?;
    let flops = update_flops(&art, checksum, |_| {})?;
    Ok(PipelineReport {
        checksum,
        meta,
        scores,
        affinity,
        relaxation,
        partition,
        flops,
    })
}

type Estimated = ([u8; 8], Vec<SubsetScore>, AffinityMatrix, RelaxationSolution, Partition);

/// Extraction, subset scoring, affinity and clustering from a trained
/// meta-policy.
pub fn estimation_stages(
    cfg: &RunConfig,
    suite: &TaskSuite,
    art: &Artifacts,
    policy: &PolicyParams,
    value: &PolicyParams,
) -> Result<Estimated> {
    let checksum = policy.checksum();
    let ex = extract_stage(cfg, suite, art, policy, value).map_err(|e| e.in_stage("extract"))?;
    let scores = estimate_stage(cfg, art, &ex.store).map_err(|e| e.in_stage("estimate"))?;
    let affinity = affinity_stage(art, file::AFFINITY, &score_pairs(&scores), suite.n_tasks(), checksum)
        .map_err(|e| e.in_stage("affinity"))?;
    let (relaxation, partition) =
        cluster_stage(cfg, art, &affinity.values, checksum, PIPELINE_CLUSTER).map_err(|e| e.in_stage("cluster"))?;
    Ok((checksum, scores, affinity, relaxation, partition))
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub scores: Vec<SubsetScore>,
    pub affinity: AffinityMatrix,
    pub partition: Partition,
    pub flops: FlopCount,
    pub comparison: Option<Comparison>,
}

/// Fine-tunes from the saved meta-policy on every subset, clusters the
/// resulting reward affinity and compares it with the estimated one when
/// that is present.
pub fn run_oracle(cfg: &RunConfig, out: &Path, subsets: &[Vec<usize>]) -> Result<OracleReport> {
    let suite = cfg.validate()?;
    if subsets.is_empty() {
        return Err(Error::Precondition("oracle needs at least one subset".into()));
    }
    let art = Artifacts::new(out);
    let (policy, value) = load_meta(&art)?;
    let checksum = policy.checksum();
    let seed = cfg.seeds().oracle;
    let outcomes = subsets
        .par_iter()
        .map(|s| {
            finetune_oracle(
                &policy,
                &value,
                &suite,
                s,
                &cfg.oracle.budget,
                &cfg.ppo,
                cfg.oracle.eval_episodes,
                seed,
            )
            .map(|o| (o.mean_reward(), o.flops))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("oracle"))?;
    let flops: FlopCount = outcomes.iter().map(|o| o.1).sum();
    let scores: Vec<SubsetScore> = subsets
        .iter()
        .zip(&outcomes)
        .map(|(s, (r, _))| {
            let mut subset = s.clone();
            subset.sort_unstable();
            SubsetScore {
                subset,
                delta: Vec::new(),
                score: *r,
                loss: -r,
                converged: true,
                iterations: cfg.oracle.budget.iterations,
            }
        })
        .collect();
    io::write_json(
        &art.path(file::ORACLE_SCORES),
        &Stamped::new(
            checksum,
            ScoreList {
                scores: scores.clone(),
                failed: Vec::new(),
            },
        ),
    )?;
    let affinity = affinity_stage(&art, file::ORACLE_AFFINITY, &score_pairs(&scores), suite.n_tasks(), checksum)?;
    let (_, partition) = cluster_stage(cfg, &art, &affinity.values, checksum, ORACLE_CLUSTER)?;
    let f = flops.get();
    update_flops(&art, checksum, |r| r.oracle = Some(f))?;

    let comparison = if art.exists(file::AFFINITY) && art.exists(file::PARTITION) && art.exists(file::SCORES) {
        let est_u = load_matrix(&art, file::AFFINITY, checksum)?;
        let est_p = load_stamped_partition(&art.path(file::PARTITION), checksum)?;
        let est_scores = load_scores(&art, file::SCORES, checksum)?;
        let (a, b) = matched_scores(&est_scores, &scores);
        let c = compare(&est_u, &affinity.values, &est_p, &partition, &a, &b)?;
        io::write_json(&art.path(file::COMPARISON), &Stamped::new(checksum, c.clone()))?;
        Some(c)
    } else {
        None
    };
    Ok(OracleReport {
        scores,
        affinity,
        partition,
        flops,
        comparison,
    })
}

pub fn load_stamped_partition(path: &Path, checksum: [u8; 8]) -> Result<Partition> {
    io::read_json::<Stamped<Partition>>(path)?.checked(path, checksum)
}

/// Estimated and oracle scores for the subsets both runs scored, in the
/// oracle's order.
fn matched_scores(est: &[SubsetScore], oracle: &[SubsetScore]) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut used = vec![false; est.len()];
    for o in oracle {
        if let Some(i) = (0..est.len()).find(|&i| !used[i] && est[i].subset == o.subset) {
            used[i] = true;
            a.push(est[i].score);
            b.push(o.score);
        }
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorTable {
    pub mode: DirectionMode,
    pub rows: Vec<TaylorRow>,
}

/// Relative first-order residuals at each target distance, written as a
/// table with one row per distance.
pub fn taylor_stage(
    cfg: &RunConfig,
    suite: &TaskSuite,
    art: &Artifacts,
    distances: &[f64],
) -> Result<Vec<TaylorRow>> {
    let (policy, value) = load_meta(art)?;
    let checksum = policy.checksum();
    let t = &cfg.analysis.taylor;
    let seed = cfg.seeds().analysis;
    let seeds: Vec<u64> = (0..t.directions as u64).map(|i| seed.wrapping_add(i)).collect();
    let directions = match t.mode {
        DirectionMode::Isotropic => isotropic_directions(policy.dim(), &seeds),
        DirectionMode::Finetune => finetune_directions(
            &policy,
            &value,
            suite,
            t.subset_size.min(suite.n_tasks()),
            &t.finetune,
            &cfg.ppo,
            &seeds,
        )?,
    };
    let batch = eval_batch(&policy, &value, suite, t.eval_steps_per_task, seed)?;
    let rows = taylor_scan(&batch, policy.theta(), distances, &directions)?;
    io::write_text(&art.path(file::TAYLOR_CSV), &taylor_csv(suite, &rows, checksum))?;
    io::write_json(
        &art.path(file::TAYLOR_JSON),
        &Stamped::new(
            checksum,
            TaylorTable {
                mode: t.mode,
                rows: rows.clone(),
            },
        ),
    )?;
    Ok(rows)
}

/// Rows are target distances, the column is the suite; cells hold the mean
/// relative residual in percent with its spread across directions.
pub fn taylor_csv(suite: &TaskSuite, rows: &[TaylorRow], checksum: [u8; 8]) -> String {
    let name = match suite.kind() {
        crate::envs::SuiteKind::MultigoalGrid => "multigoal_grid",
        crate::envs::SuiteKind::ParamCartpole => "param_cartpole",
    };
    let mut out = format!(
        "# theta_checksum={}\ndistance_pct,{name}_rss_pct,{name}_rss_std_pct\n",
        io::checksum_hex(checksum)
    );
    let mut distances: Vec<f64> = rows.iter().map(|r| r.target_distance).collect();
    distances.dedup();
    for d in distances {
        let means: Vec<f64> = rows
            .iter()
            .filter(|r| r.target_distance == d)
            .map(|r| r.report.mean_rss)
            .collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
        out.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", 100.0 * d, 100.0 * mean, 100.0 * std));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianArtifact {
    pub train_tasks: Vec<usize>,
    pub held_out_tasks: Vec<usize>,
    pub report: HessianReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_eigenvalue: Option<f64>,
}

fn pg_loss(
    policy: &PolicyParams,
    value: &PolicyParams,
    suite: &TaskSuite,
    tasks: &[usize],
    steps: usize,
    cfg: &RunConfig,
    seed: u64,
) -> Result<PgLoss> {
    let mut batch = PolicyBatch {
        layer_sizes: policy.layer_sizes().to_vec(),
        states: Vec::new(),
        actions: Vec::new(),
    };
    let mut adv = Vec::new();
    for &task in tasks {
        let mut rng = rng_from(seed, &[tag::HESSIAN, 2, task as u64]);
        let roll = collect_rollouts(policy, value, suite, task, steps, suite.gamma, cfg.ppo.gae_lambda, &mut rng)?;
        for r in roll.records {
            batch.states.extend(r.state);
            batch.actions.push(r.action);
            adv.push(r.advantage);
        }
    }
    PgLoss::new(batch, adv, cfg.analysis.hessian.bound.loss_cap)
}

/// Adapts the meta-policy to the training tasks, then measures its loss gap
/// to the held-out tasks against the Hessian-based bound.
pub fn hessian_stage(cfg: &RunConfig, suite: &TaskSuite, art: &Artifacts) -> Result<HessianArtifact> {
    let (policy, value) = load_meta(art)?;
    let checksum = policy.checksum();
    let h = &cfg.analysis.hessian;
    let seed = cfg.seeds().analysis;
    let n = suite.n_tasks();
    let mut train_tasks = match &h.train_tasks {
        Some(t) => t.clone(),
        None => {
            let mut rng = rng_from(seed, &[tag::HESSIAN, 1]);
            rand::seq::index::sample(&mut rng, n, (n / 2).max(1)).into_vec()
        }
    };
    train_tasks.sort_unstable();
    let held_out: Vec<usize> = (0..n).filter(|t| !train_tasks.contains(t)).collect();
    let (tuned, tuned_value, _) = finetune(&policy, &value, suite, &train_tasks, &cfg.oracle.budget, &cfg.ppo, seed)?;
    let train = pg_loss(&tuned, &tuned_value, suite, &train_tasks, h.steps_per_task, cfg, seed)?;
    let test = pg_loss(&tuned, &tuned_value, suite, &held_out, h.steps_per_task, cfg, seed)?;
    let report = generalization_report(tuned.theta(), &train, &test, &h.bound, seed)?;
    let top = if h.top_eigenvalue {
        Some(top_eigenvalue(&test, tuned.theta(), h.power_iters, seed)?)
    } else {
        None
    };
    let out = HessianArtifact {
        train_tasks,
        held_out_tasks: held_out,
        report,
        top_eigenvalue: top,
    };
    io::write_json(&art.path(file::HESSIAN), &Stamped::new(checksum, out.clone()))?;
    Ok(out)
}
