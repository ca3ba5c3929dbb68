use crate::rng::{rng_from, tag};
use crate::{Error, Result};
use nalgebra::DMatrix;

/// `m` uniformly drawn task subsets of size `alpha`, each sorted.
pub fn sample_subsets(n: usize, m: usize, alpha: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if alpha < 2 || alpha > n {
        return Err(Error::Precondition(format!("subset size {alpha} must lie in 2..={n}")));
    }
    if m == 0 {
        return Err(Error::Precondition("need at least one subset".into()));
    }
    let mut rng = rng_from(seed, &[tag::SUBSETS]);
    let subsets: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            let mut s = rand::seq::index::sample(&mut rng, n, alpha).into_vec();
            s.sort_unstable();
            s
        })
        .collect();
    let counts = pair_counts(&subsets, n);
    let uncovered = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| counts[(i, j)] == 0)
        .count();
    if uncovered > 0 {
        log::warn!("{uncovered} task pairs never appear together in {m} subsets");
    }
    Ok(subsets)
}

/// `counts[(i, j)]` is the number of subsets containing both `i` and `j`.
pub fn pair_counts(subsets: &[Vec<usize>], n: usize) -> DMatrix<usize> {
    let mut counts = DMatrix::zeros(n, n);
    for s in subsets {
        for &i in s {
            for &j in s {
                counts[(i, j)] += 1;
            }
        }
    }
    counts
}

/// Symmetric task-affinity matrix with co-occurrence counts. Pairs that
/// never co-occur hold the global mean score and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: DMatrix<f64>,
    pub counts: DMatrix<usize>,
    pub missing: DMatrix<bool>,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn missing_pairs(&self) -> usize {
        let n = self.n();
        (0..n)
            .flat_map(|i| (i..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.missing[(i, j)])
            .count()
    }
}

/// `U[i][j]` = mean score over subsets containing both `i` and `j`.
pub fn build_affinity(scores: &[(Vec<usize>, f64)], n: usize) -> Result<AffinityMatrix> {
    if scores.is_empty() {
        return Err(Error::Precondition("no subset scores to build an affinity from".into()));
    }
    let mut sums = DMatrix::<f64>::zeros(n, n);
    let mut counts = DMatrix::<usize>::zeros(n, n);
    let mut total = 0.0;
    for (i, (subset, score)) in scores.iter().enumerate() {
        if !score.is_finite() {
            return Err(Error::numeric("subset score", i));
        }
        if let Some(&t) = subset.iter().find(|&&t| t >= n) {
            return Err(Error::Precondition(format!("task {t} out of range for {n} tasks")));
        }
        total += score;
        for &a in subset {
            for &b in subset {
                sums[(a, b)] += score;
                counts[(a, b)] += 1;
            }
        }
    }
    let mean = total / scores.len() as f64;
    let missing = counts.map(|c| c == 0);
    let values = DMatrix::from_fn(n, n, |i, j| {
        if counts[(i, j)] == 0 {
            mean
        } else {
            sums[(i, j)] / counts[(i, j)] as f64
        }
    });
    Ok(AffinityMatrix {
        values,
        counts,
        missing,
    })
}
