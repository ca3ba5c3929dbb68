use crate::affinity::RelaxConfig;
use crate::analysis::{DirectionMode, GeneralizationConfig};
use crate::envs::{make_suite, SuiteConfig, TaskSuite};
use crate::gradex::{ExtractConfig, SolverConfig};
use crate::rng::{derive_seed, tag};
use crate::trainer::{NetConfig, PpoConfig, TrainBudget};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-stage seeds. Unset entries are derived from the run seed when the
/// configuration is resolved.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub meta: Option<u64>,
    pub projection: Option<u64>,
    pub extract: Option<u64>,
    pub subsets: Option<u64>,
    pub oracle: Option<u64>,
    pub rounding: Option<u64>,
    pub analysis: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradexParams {
    /// Sketch dimension `d`.
    pub projection_dim: usize,
    /// Number of sampled subsets `m`.
    pub subsets: usize,
    /// Subset size `alpha`; `max(2, n / 2)` when unset.
    pub subset_size: Option<usize>,
    pub extract: ExtractConfig,
    pub solver: SolverConfig,
}

impl Default for GradexParams {
    fn default() -> Self {
        GradexParams {
            projection_dim: 400,
            subsets: 40,
            subset_size: None,
            extract: ExtractConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum AffinityMode {
    FixedK { k: usize },
    Auto { lambda: f64 },
    /// Smallest `k` in the sweep whose rounded density is within 2% of the best.
    SelectK { ks: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinityParams {
    pub mode: AffinityMode,
    pub relax: RelaxConfig,
}

impl Default for AffinityParams {
    fn default() -> Self {
        AffinityParams {
            mode: AffinityMode::FixedK { k: 2 },
            relax: RelaxConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub budget: TrainBudget,
    pub eval_episodes: usize,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            budget: TrainBudget {
                iterations: 10,
                steps_per_task: 1024,
                ..TrainBudget::default()
            },
            eval_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaylorParams {
    pub enabled: bool,
    pub distances: Vec<f64>,
    pub mode: DirectionMode,
    /// Directions per distance, one seed each.
    pub directions: usize,
    /// Size of the random subsets behind fine-tune directions.
    pub subset_size: usize,
    pub finetune: TrainBudget,
    pub eval_steps_per_task: usize,
}

impl Default for TaylorParams {
    fn default() -> Self {
        TaylorParams {
            enabled: true,
            distances: vec![0.001, 0.005, 0.01],
            mode: DirectionMode::Finetune,
            directions: 5,
            subset_size: 5,
            finetune: TrainBudget {
                iterations: 2,
                steps_per_task: 512,
                ..TrainBudget::default()
            },
            eval_steps_per_task: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HessianParams {
    pub enabled: bool,
    pub bound: GeneralizationConfig,
    /// Training tasks for the adapted policy; the rest are held out.
    pub train_tasks: Option<Vec<usize>>,
    pub steps_per_task: usize,
    /// Also report the top Hessian eigenvalue by power iteration.
    pub top_eigenvalue: bool,
    pub power_iters: usize,
}

impl Default for HessianParams {
    fn default() -> Self {
        HessianParams {
            enabled: true,
            bound: GeneralizationConfig::default(),
            train_tasks: None,
            steps_per_task: 256,
            top_eigenvalue: false,
            power_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisParams {
    pub taylor: TaylorParams,
    pub hessian: HessianParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub suite: SuiteConfig,
    pub net: NetConfig,
    pub train: TrainBudget,
    pub ppo: PpoConfig,
    pub gradex: GradexParams,
    pub affinity: AffinityParams,
    pub oracle: OracleParams,
    pub analysis: AnalysisParams,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            suite: SuiteConfig::planted_grid(),
            net: NetConfig::default(),
            train: TrainBudget::default(),
            ppo: PpoConfig::default(),
            gradex: GradexParams::default(),
            affinity: AffinityParams::default(),
            oracle: OracleParams::default(),
            analysis: AnalysisParams::default(),
            seeds: Seeds::default(),
        }
    }
}

/// Seeds with every entry filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedSeeds {
    pub meta: u64,
    pub projection: u64,
    pub extract: u64,
    pub subsets: u64,
    pub oracle: u64,
    pub rounding: u64,
    pub analysis: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Copy with every stage seed made explicit.
    pub fn resolved(&self) -> RunConfig {
        let base = self.seed;
        let fill = |s: Option<u64>, t: u64| Some(s.unwrap_or_else(|| derive_seed(base, &[t])));
        let mut out = self.clone();
        out.seeds = Seeds {
            meta: fill(self.seeds.meta, tag::META),
            projection: fill(self.seeds.projection, tag::PROJECTION),
            extract: fill(self.seeds.extract, tag::EXTRACT),
            subsets: fill(self.seeds.subsets, tag::SUBSETS),
            oracle: fill(self.seeds.oracle, tag::ORACLE),
            rounding: fill(self.seeds.rounding, tag::ROUNDING),
            analysis: fill(self.seeds.analysis, tag::TAYLOR),
        };
        out
    }

    pub fn seeds(&self) -> ResolvedSeeds {
        let r = self.resolved().seeds;
        ResolvedSeeds {
            meta: r.meta.expect("resolved"),
            projection: r.projection.expect("resolved"),
            extract: r.extract.expect("resolved"),
            subsets: r.subsets.expect("resolved"),
            oracle: r.oracle.expect("resolved"),
            rounding: r.rounding.expect("resolved"),
            analysis: r.analysis.expect("resolved"),
        }
    }

    pub fn subset_size(&self) -> usize {
        self.gradex
            .subset_size
            .unwrap_or_else(|| (self.suite.n_tasks / 2).max(2))
    }

    /// Checks every section and builds the suite.
    pub fn validate(&self) -> Result<TaskSuite> {
        let suite = make_suite(&self.suite)?;
        let n = suite.n_tasks();
        self.train.validate()?;
        self.ppo.validate()?;
        self.oracle.budget.validate()?;
        self.gradex.solver.validate()?;
        if self.net.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("net.hidden", "widths must be positive"));
        }
        if self.gradex.projection_dim == 0 {
            return Err(Error::config("gradex.projection_dim", "must be positive"));
        }
        if self.gradex.subsets == 0 {
            return Err(Error::config("gradex.subsets", "must be positive"));
        }
        if self.gradex.extract.steps_per_task == 0 {
            return Err(Error::config("gradex.extract.steps_per_task", "must be positive"));
        }
        let alpha = self.subset_size();
        if alpha < 2 || alpha > n {
            return Err(Error::config("gradex.subset_size", format!("{alpha} outside 2..={n}")));
        }
        match &self.affinity.mode {
            AffinityMode::FixedK { k } if *k == 0 || *k > n => {
                return Err(Error::config("affinity.k", format!("{k} outside 1..={n}")));
            }
            AffinityMode::Auto { lambda } if !lambda.is_finite() => {
                return Err(Error::config("affinity.lambda", "must be finite"));
            }
            AffinityMode::SelectK { ks } if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > n) => {
                return Err(Error::config("affinity.ks", format!("each k must lie in 1..={n}")));
            }
            _ => {}
        }
        if self.oracle.eval_episodes == 0 {
            return Err(Error::config("oracle.eval_episodes", "must be positive"));
        }
        let t = &self.analysis.taylor;
        if t.enabled {
            if t.distances.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
                return Err(Error::config("analysis.taylor.distances", "must be finite and non-negative"));
            }
            if t.directions == 0 || t.eval_steps_per_task == 0 {
                return Err(Error::config("analysis.taylor", "directions and eval_steps_per_task must be positive"));
            }
            if t.mode == DirectionMode::Finetune {
                t.finetune.validate()?;
                if t.subset_size == 0 {
                    return Err(Error::config("analysis.taylor.subset_size", "must be positive"));
                }
            }
        }
        let h = &self.analysis.hessian;
        if h.enabled {
            if !(h.bound.loss_cap > 0.0 && h.bound.loss_cap.is_finite()) {
                return Err(Error::config("analysis.hessian.bound.loss_cap", "must be positive"));
            }
            if h.bound.probes == 0 || h.steps_per_task == 0 {
                return Err(Error::config("analysis.hessian", "probes and steps_per_task must be positive"));
            }
            if let Some(tasks) = &h.train_tasks {
                crate::trainer::check_subset(tasks, n)?;
                if tasks.len() == n {
                    return Err(Error::config("analysis.hessian.train_tasks", "must leave at least one task held out"));
                }
            }
        }
        Ok(suite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_bit_identically() {
        let cfg = RunConfig::default().resolved();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn explicit_seeds_survive_resolution() {
        let mut cfg = RunConfig::default();
        cfg.seeds.oracle = Some(77);
        let r = cfg.seeds();
        assert_eq!(r.oracle, 77);
        assert_ne!(r.meta, r.extract);
        assert_eq!(cfg.resolved().seeds(), r);
    }

    #[test]
    fn validation_catches_bad_fields() {
        assert!(RunConfig::default().validate().is_ok());
        let mut cfg = RunConfig::default();
        cfg.gradex.subset_size = Some(9);
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let mut cfg = RunConfig::default();
        cfg.affinity.mode = AffinityMode::FixedK { k: 0 };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.analysis.hessian.train_tasks = Some((0..8).collect());
        assert!(cfg.validate().is_err());
    }
}
