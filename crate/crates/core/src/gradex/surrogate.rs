use super::store::GradientStore;
use crate::flops::FlopCount;
use crate::linalg::{dot, gemm, norm_inf};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Ridge weight on `|delta|^2`; zero allowed.
    pub ridge: f64,
    /// Convergence threshold on the gradient infinity norm.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            ridge: 1e-3,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::config("ridge", "must be finite and non-negative"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be positive"));
        }
        Ok(())
    }
}

/// `log(1 + exp(-m))` without overflow.
fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// `1 / (1 + exp(m))`.
fn sigmoid_neg(m: f64) -> f64 {
    if m > 0.0 {
        let e = (-m).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + m.exp())
    }
}

/// Weighted logistic regression
/// `(1/n) sum_i w_i log(1 + exp(-y_i x_i . delta)) + ridge |delta|^2`.
///
/// Rows that agree in features and label are merged by summing weights;
/// `n` stays the original sample count so the objective is unchanged.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    d: usize,
    rows: Vec<f64>,
    labels: Vec<f64>,
    weights: Vec<f64>,
    count: usize,
    ridge: f64,
}

impl LogisticProblem {
    /// Builds the problem from raw rows; `labels` must be `+-1`.
    pub fn new(d: usize, rows: Vec<f64>, labels: Vec<f64>, weights: Vec<f64>, ridge: f64) -> Result<Self> {
        let n = labels.len();
        if rows.len() != n * d || weights.len() != n {
            return Err(Error::Shape {
                expected: n * d,
                got: rows.len(),
            });
        }
        if n == 0 {
            return Err(Error::Precondition("surrogate needs at least one record".into()));
        }
        Ok(LogisticProblem {
            d,
            rows,
            labels,
            weights,
            count: n,
            ridge,
        })
    }

    /// Records of `subset` with duplicates merged.
    pub fn from_store(store: &GradientStore, subset: &[usize], ridge: f64) -> Result<Self> {
        let d = store.header.d;
        let mut index: HashMap<(Vec<u32>, i8), usize> = HashMap::new();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut weights = Vec::new();
        let mut count = 0;
        for rec in store.records.iter().filter(|r| subset.contains(&r.task_id)) {
            count += 1;
            let key = (rec.features.iter().map(|x| x.to_bits()).collect(), rec.label);
            let slot = *index.entry(key).or_insert_with(|| {
                rows.extend(rec.features.iter().map(|&x| x as f64));
                labels.push(rec.label as f64);
                weights.push(0.0);
                labels.len() - 1
            });
            weights[slot] += rec.weight as f64;
        }
        if count == 0 {
            return Err(Error::Precondition(format!("no records for subset {subset:?}")));
        }
        Ok(LogisticProblem {
            d,
            rows,
            labels,
            weights,
            count,
            ridge,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Original number of samples behind the merged rows.
    pub fn sample_count(&self) -> usize {
        self.count
    }

    pub fn distinct_rows(&self) -> usize {
        self.labels.len()
    }

    fn margins(&self, delta: &[f64]) -> Vec<f64> {
        let m = self.labels.len();
        let mut z = vec![0.0; m];
        gemm(m, self.d, 1, 1.0, &self.rows, (self.d, 1), delta, (1, 1), 0.0, &mut z, (1, 1));
        z.iter_mut().zip(&self.labels).for_each(|(z, y)| *z *= y);
        z
    }

    /// Average weighted logistic loss without the ridge term.
    pub fn data_loss(&self, delta: &[f64]) -> f64 {
        let margins = self.margins(delta);
        let total: f64 = margins.iter().zip(&self.weights).map(|(&m, &w)| w * softplus_neg(m)).sum();
        total / self.count as f64
    }

    pub fn objective(&self, delta: &[f64]) -> f64 {
        self.data_loss(delta) + self.ridge * dot(delta, delta)
    }

    pub fn gradient(&self, delta: &[f64]) -> Vec<f64> {
        let margins = self.margins(delta);
        self.gradient_at(delta, &margins)
    }

    fn gradient_at(&self, delta: &[f64], margins: &[f64]) -> Vec<f64> {
        let m = self.labels.len();
        let inv = 1.0 / self.count as f64;
        let coef: Vec<f64> = (0..m)
            .map(|i| -inv * self.weights[i] * self.labels[i] * sigmoid_neg(margins[i]))
            .collect();
        let mut g: Vec<f64> = delta.iter().map(|x| 2.0 * self.ridge * x).collect();
        gemm(1, m, self.d, 1.0, &coef, (m, 1), &self.rows, (self.d, 1), 1.0, &mut g, (self.d, 1));
        g
    }

    fn hessian_at(&self, margins: &[f64]) -> DMatrix<f64> {
        let m = self.labels.len();
        let d = self.d;
        let inv = 1.0 / self.count as f64;
        let mut scaled = self.rows.clone();
        for (i, row) in scaled.chunks_exact_mut(d).enumerate() {
            let s = sigmoid_neg(margins[i]);
            let c = (inv * self.weights[i] * s * (1.0 - s)).sqrt();
            row.iter_mut().for_each(|x| *x *= c);
        }
        let mut h = vec![0.0; d * d];
        gemm(d, m, d, 1.0, &scaled, (1, d), &scaled, (d, 1), 0.0, &mut h, (d, 1));
        let mut h = DMatrix::from_row_slice(d, d, &h);
        for k in 0..d {
            h[(k, k)] += 2.0 * self.ridge;
        }
        h
    }

    /// Damped Newton with Armijo backtracking, falling back to a gradient
    /// step when the Newton system cannot be factored.
    pub fn solve(&self, cfg: &SolverConfig) -> Fit {
        let d = self.d;
        let m = self.labels.len() as u64;
        let du = d as u64;
        let mut flops = FlopCount::default();
        let mut delta = vec![0.0; d];
        let mut margins = self.margins(&delta);
        let mut f = self.objective(&delta);
        let mut g = self.gradient_at(&delta, &margins);
        flops.add(6 * m * du);
        let mut converged = norm_inf(&g) <= cfg.tol;
        let mut iterations = 0;
        while !converged && iterations < cfg.max_iter {
            iterations += 1;
            let h = self.hessian_at(&margins);
            flops.add(2 * m * du * du + du * du * du / 3);
            let gv = DVector::from_column_slice(&g);
            let step: Vec<f64> = match h.cholesky() {
                Some(chol) => {
                    let s = chol.solve(&(-&gv));
                    if s.iter().all(|x| x.is_finite()) && s.dot(&gv) < 0.0 {
                        s.iter().copied().collect()
                    } else {
                        g.iter().map(|x| -x).collect()
                    }
                }
                None => g.iter().map(|x| -x).collect(),
            };
            let slope = dot(&g, &step);
            let g_norm = norm_inf(&g);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = delta.iter().zip(&step).map(|(x, s)| x + t * s).collect();
                let ft = self.objective(&trial);
                flops.add(4 * m * du);
                if ft <= f + 1e-4 * t * slope {
                    accepted = Some((trial, ft));
                    break;
                }
                // At round-off level the objective cannot resolve progress;
                // take the step if it still shrinks the gradient.
                if (ft - f).abs() <= 1e-15 * f.abs().max(1.0) {
                    let gt = self.gradient(&trial);
                    flops.add(4 * m * du);
                    if norm_inf(&gt) < g_norm {
                        accepted = Some((trial, ft));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((next, fnext)) = accepted else {
                break;
            };
            delta = next;
            f = fnext;
            margins = self.margins(&delta);
            g = self.gradient_at(&delta, &margins);
            flops.add(4 * m * du);
            converged = norm_inf(&g) <= cfg.tol;
        }
        Fit {
            loss: self.data_loss(&delta),
            objective: f,
            grad_norm: norm_inf(&g),
            delta,
            converged,
            iterations,
            flops,
        }
    }
}

/// Outcome of one surrogate solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub delta: Vec<f64>,
    /// Unregularized average loss at `delta`.
    pub loss: f64,
    /// Regularized objective at `delta`.
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub flops: FlopCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub subset: Vec<usize>,
    #[serde(skip)]
    pub delta: Vec<f64>,
    /// Negated surrogate loss; higher is better.
    pub score: f64,
    pub loss: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Sorted, duplicate-free copy of a subset.
pub fn canonical_subset(subset: &[usize], n_tasks: usize) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::Precondition("subset must be non-empty".into()));
    }
    let mut s = subset.to_vec();
    s.sort_unstable();
    if s.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Precondition(format!("subset {subset:?} repeats a task")));
    }
    if let Some(&t) = s.last().filter(|&&t| t >= n_tasks) {
        return Err(Error::Precondition(format!("task {t} out of range for {n_tasks} tasks")));
    }
    Ok(s)
}

/// Fits the surrogate on the records of `subset` and scores it.
pub fn fit_surrogate(store: &GradientStore, subset: &[usize], cfg: &SolverConfig) -> Result<(SubsetScore, FlopCount)> {
    cfg.validate()?;
    let subset = canonical_subset(subset, store.header.n_tasks)?;
    let problem = LogisticProblem::from_store(store, &subset, cfg.ridge)?;
    let fit = problem.solve(cfg);
    if !fit.loss.is_finite() {
        return Err(Error::numeric("surrogate loss", 0));
    }
    if !fit.converged {
        log::warn!(
            "surrogate for {subset:?} stopped after {} iterations, gradient {:.3e}",
            fit.iterations,
            fit.grad_norm
        );
    }
    let score = SubsetScore {
        subset,
        score: -fit.loss,
        loss: fit.loss,
        converged: fit.converged,
        iterations: fit.iterations,
        delta: fit.delta,
    };
    Ok((score, fit.flops))
}

#[derive(Debug)]
pub struct Estimates {
    /// One entry per requested subset, in request order.
    pub results: Vec<Result<SubsetScore>>,
    pub flops: FlopCount,
}

/// Independent surrogate fits over many subsets.
pub fn estimate_subsets(store: &GradientStore, subsets: &[Vec<usize>], cfg: &SolverConfig) -> Estimates {
    let fits: Vec<Result<(SubsetScore, FlopCount)>> =
        subsets.par_iter().map(|s| fit_surrogate(store, s, cfg)).collect();
    let mut flops = FlopCount::default();
    let results = fits
        .into_iter()
        .map(|r| {
            r.map(|(score, f)| {
                flops += f;
                score
            })
        })
        .collect();
    Estimates { results, flops }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradex::store::{FeatureRecord, StoreHeader};
    use crate::rng::rng_from;
    use rand::Rng;

    fn random_problem(seed: u64, n: usize, d: usize, ridge: f64) -> LogisticProblem {
        let mut rng = rng_from(seed, &[]);
        let rows = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let weights = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        LogisticProblem::new(d, rows, labels, weights, ridge).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let prob = random_problem(1, 30, 5, 0.01);
        let x: Vec<f64> = vec![0.3, -0.2, 0.5, 0.1, -0.4];
        let g = prob.gradient(&x);
        for k in 0..5 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (prob.objective(&xp) - prob.objective(&xm)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-3), "{fd} vs {}", g[k]);
        }
    }

    #[test]
    fn zero_direction_costs_log_two_per_weight() {
        let prob = random_problem(2, 12, 3, 0.0);
        let total_w: f64 = prob.weights.iter().sum();
        let expect = total_w * std::f64::consts::LN_2 / 12.0;
        assert!((prob.data_loss(&[0.0; 3]) - expect).abs() < 1e-15);
    }

    #[test]
    fn single_record_matches_golden_section() {
        let prob = LogisticProblem::new(1, vec![1.0], vec![1.0], vec![1.0], 0.1).unwrap();
        let fit = prob.solve(&SolverConfig {
            ridge: 0.1,
            ..SolverConfig::default()
        });
        assert!(fit.converged);
        let f = |t: f64| (-t).exp().ln_1p() + 0.1 * t * t;
        let (mut a, mut b) = (-10.0, 10.0);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        assert!((fit.delta[0] - (a + b) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn separable_positive_data_beats_log_two() {
        let rows = vec![1.0, 0.0, 0.8, 0.3, 0.6, -0.2];
        let prob = LogisticProblem::new(2, rows, vec![1.0; 3], vec![1.0; 3], 1e-3).unwrap();
        let fit = prob.solve(&SolverConfig::default());
        assert!(fit.converged);
        assert!(fit.loss < std::f64::consts::LN_2);
    }

    #[test]
    fn newton_decreases_the_objective_and_converges() {
        for seed in 0..20 {
            let prob = random_problem(seed, 40, 6, 1e-3);
            let fit = prob.solve(&SolverConfig::default());
            assert!(fit.converged, "seed {seed}: {}", fit.grad_norm);
            assert!(fit.grad_norm <= 1e-8);
            assert!(fit.objective <= prob.objective(&[0.0; 6]));
        }
    }

    fn store_from(records: Vec<(usize, Vec<f32>, i8, f32)>, n_tasks: usize, d: usize) -> GradientStore {
        GradientStore {
            header: StoreHeader {
                p: d,
                d,
                n_tasks,
                projection_seed: 0,
                theta_checksum: [0; 8],
            },
            records: records
                .into_iter()
                .map(|(task_id, features, label, weight)| FeatureRecord {
                    task_id,
                    features,
                    label,
                    weight,
                })
                .collect(),
        }
    }

    fn random_store(seed: u64, n: usize, n_tasks: usize, d: usize) -> GradientStore {
        let mut rng = rng_from(seed, &[]);
        let recs = (0..n)
            .map(|i| {
                let f: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                (i % n_tasks, f, if rng.random_bool(0.5) { 1 } else { -1 }, rng.random_range(0.0f32..1.0))
            })
            .collect();
        store_from(recs, n_tasks, d)
    }

    #[test]
    fn duplicated_records_leave_the_solution_unchanged() {
        let store = random_store(3, 40, 2, 4);
        let mut doubled = store.clone();
        doubled.records.extend(store.records.clone());
        let cfg = SolverConfig::default();
        let (a, _) = fit_surrogate(&store, &[0, 1], &cfg).unwrap();
        let (b, _) = fit_surrogate(&doubled, &[0, 1], &cfg).unwrap();
        let prob = LogisticProblem::from_store(&doubled, &[0, 1], cfg.ridge).unwrap();
        assert_eq!(prob.distinct_rows(), 40);
        assert_eq!(prob.sample_count(), 80);
        for (x, y) in a.delta.iter().zip(&b.delta) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn record_order_does_not_matter() {
        let store = random_store(4, 60, 3, 5);
        let mut shuffled = store.clone();
        shuffled.records.reverse();
        shuffled.records.swap(3, 17);
        let cfg = SolverConfig::default();
        let (a, _) = fit_surrogate(&store, &[0, 2], &cfg).unwrap();
        let (b, _) = fit_surrogate(&shuffled, &[2, 0], &cfg).unwrap();
        assert_eq!(a.subset, vec![0, 2]);
        for (x, y) in a.delta.iter().zip(&b.delta) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn score_is_negated_loss_on_subset_records() {
        let store = random_store(5, 30, 3, 3);
        let (s, _) = fit_surrogate(&store, &[1], &SolverConfig::default()).unwrap();
        assert_eq!(s.score, -s.loss);
        let prob = LogisticProblem::from_store(&store, &[1], 1e-3).unwrap();
        assert_eq!(prob.sample_count(), 10);
        assert!((prob.data_loss(&s.delta) - s.loss).abs() < 1e-15);
    }

    #[test]
    fn estimates_keep_order_and_errors() {
        let store = random_store(6, 50, 5, 4);
        let subsets = vec![vec![0, 1], vec![9], vec![3, 4, 2], vec![]];
        let est = estimate_subsets(&store, &subsets, &SolverConfig::default());
        assert_eq!(est.results.len(), 4);
        assert_eq!(est.results[0].as_ref().unwrap().subset, vec![0, 1]);
        assert!(est.results[1].is_err());
        assert_eq!(est.results[2].as_ref().unwrap().subset, vec![2, 3, 4]);
        assert!(est.results[3].is_err());
        assert!(est.flops.get() > 0);
        assert!(estimate_subsets(&store, &[], &SolverConfig::default()).results.is_empty());
    }
}
