use super::relax::{solve_relaxation, RelaxConfig, RelaxMode};
use crate::rng::{rng_from, tag};
use crate::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Disjoint, covering, non-empty groups of task ids. Groups are kept sorted
/// and ordered by their smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPartition", into = "RawPartition")]
pub struct Partition {
    groups: Vec<Vec<usize>>,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct RawPartition {
    groups: Vec<Vec<usize>>,
}

impl TryFrom<RawPartition> for Partition {
    type Error = Error;
    fn try_from(raw: RawPartition) -> Result<Self> {
        let n = raw.groups.iter().map(Vec::len).sum();
        Partition::new(raw.groups, n)
    }
}

impl From<Partition> for RawPartition {
    fn from(p: Partition) -> Self {
        RawPartition { groups: p.groups }
    }
}

impl Partition {
    pub fn new(mut groups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for g in &mut groups {
            if g.is_empty() {
                return Err(Error::Precondition("partition has an empty group".into()));
            }
            g.sort_unstable();
            for &t in g.iter() {
                if t >= n {
                    return Err(Error::Precondition(format!("task {t} outside ground set of {n}")));
                }
                if seen[t] {
                    return Err(Error::Precondition(format!("task {t} appears twice")));
                }
                seen[t] = true;
            }
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(Error::Precondition(format!("task {t} is not covered")));
        }
        groups.sort_by_key(|g| g[0]);
        Ok(Partition { groups, n })
    }

    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); k];
        for (t, &l) in labels.iter().enumerate() {
            groups[l].push(t);
        }
        groups.retain(|g| !g.is_empty());
        Partition::new(groups, labels.len())
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> Vec<usize> {
        let mut l = vec![0; self.n];
        for (g, members) in self.groups.iter().enumerate() {
            for &t in members {
                l[t] = g;
            }
        }
        l
    }
}

/// `sum_g (1_g^T U 1_g) / |g|`, the objective the relaxation relaxes.
pub fn density(u: &DMatrix<f64>, partition: &Partition) -> f64 {
    partition
        .groups()
        .iter()
        .map(|g| {
            let s: f64 = g.iter().flat_map(|&i| g.iter().map(move |&j| u[(i, j)])).sum();
            s / g.len() as f64
        })
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from a k-means++ seeding. Returns labels in `0..k`,
/// possibly with empty clusters.
fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .expect("k >= 1");
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (dim, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[dim]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    labels
}

/// Splits the largest group into two around its weakest affinity link until
/// there are `k` groups.
fn repair(mut groups: Vec<Vec<usize>>, k: usize, u: &DMatrix<f64>) -> Vec<Vec<usize>> {
    groups.retain(|g| !g.is_empty());
    while groups.len() < k {
        let (gi, _) = groups
            .iter()
            .enumerate()
            .max_by_key(|(i, g)| (g.len(), std::cmp::Reverse(*i)))
            .expect("non-empty");
        let g = groups.swap_remove(gi);
        let mut weakest = (g[0], g[1]);
        for (x, &a) in g.iter().enumerate() {
            for &b in &g[x + 1..] {
                if u[(a, b)] < u[(weakest.0, weakest.1)] {
                    weakest = (a, b);
                }
            }
        }
        let (mut left, mut right) = (vec![weakest.0], vec![weakest.1]);
        for &t in &g {
            if t == weakest.0 || t == weakest.1 {
                continue;
            }
            if u[(t, weakest.0)] >= u[(t, weakest.1)] {
                left.push(t);
            } else {
                right.push(t);
            }
        }
        groups.push(left);
        groups.push(right);
    }
    groups
}

/// Spectral rounding: embed tasks with the top-`k` eigenvectors of `X`
/// scaled by root eigenvalues, run k-means with 20 seeded restarts, keep the
/// grouping of highest density under `u`.
pub fn round_partition(x: &DMatrix<f64>, k: usize, u: &DMatrix<f64>, seed: u64) -> Result<Partition> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::Precondition(format!("k = {k} must lie in 1..={n}")));
    }
    if u.nrows() != n || u.ncols() != n || x.ncols() != n {
        return Err(Error::Shape {
            expected: n,
            got: u.nrows(),
        });
    }
    if k == n {
        return Partition::new((0..n).map(|t| vec![t]).collect(), n);
    }
    if k == 1 {
        return Partition::new(vec![(0..n).collect()], n);
    }
    let eig = SymmetricEigen::new((x + x.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    // Directions at round-off level carry no grouping, only eigensolver noise.
    let floor = 1e-9 * eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
    let scale = |c: usize| {
        let l = eig.eigenvalues[c];
        if l > floor {
            l.sqrt()
        } else {
            0.0
        }
    };
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            order[..k]
                .iter()
                .map(|&c| eig.eigenvectors[(i, c)] * scale(c))
                .collect()
        })
        .collect();
    let quantum = 1e-9 * points.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let points: Vec<Vec<f64>> = points
        .into_iter()
        .map(|p| p.into_iter().map(|v| (v / quantum).round() * quantum).collect())
        .collect();

    let mut rng = rng_from(seed, &[tag::ROUNDING]);
    let mut best: Option<(f64, Partition)> = None;
    for _ in 0..20 {
        let labels = kmeans(&points, k, &mut rng);
        let mut groups = vec![Vec::new(); k];
        for (t, &l) in labels.iter().enumerate() {
            groups[l].push(t);
        }
        let p = Partition::new(repair(groups, k, u), n)?;
        let d = density(u, &p);
        if best.as_ref().is_none_or(|(bd, _)| d > *bd + 1e-12) {
            best = Some((d, p));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn entropy(sizes: impl Iterator<Item = usize>, n: f64) -> f64 {
    sizes
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `I / sqrt(H1 H2)` with natural logs. Two
/// single-cluster partitions score 1; exactly one zero-entropy side scores 0.
pub fn nmi(a: &Partition, b: &Partition) -> Result<f64> {
    if a.n() != b.n() {
        return Err(Error::Precondition(format!(
            "partitions cover {} and {} tasks",
            a.n(),
            b.n()
        )));
    }
    let n = a.n() as f64;
    let (la, lb) = (a.labels(), b.labels());
    let mut table = vec![vec![0usize; b.k()]; a.k()];
    for (x, y) in la.iter().zip(&lb) {
        table[*x][*y] += 1;
    }
    let ha = entropy(a.groups().iter().map(Vec::len), n);
    let hb = entropy(b.groups().iter().map(Vec::len), n);
    if a == b {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pi = a.groups()[i].len() as f64 / n;
            let pj = b.groups()[j].len() as f64 / n;
            mi += pij * (pij / (pi * pj)).ln();
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// One uniformly chosen member per group.
pub fn representatives(partition: &Partition, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(seed, &[tag::ROUNDING, 1]);
    partition
        .groups()
        .iter()
        .map(|g| g[rng.random_range(0..g.len())])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSweepPoint {
    pub k: usize,
    pub density: f64,
    pub partition: Partition,
}

/// Solves and rounds for every `k` in `ks`, then picks the smallest `k`
/// whose density is within 2% of the best.
pub fn select_k(
    u: &DMatrix<f64>,
    ks: &[usize],
    cfg: &RelaxConfig,
    seed: u64,
) -> Result<(usize, Vec<KSweepPoint>)> {
    if ks.is_empty() {
        return Err(Error::Precondition("empty k sweep".into()));
    }
    let points = ks
        .par_iter()
        .map(|&k| {
            let sol = solve_relaxation(u, RelaxMode::FixedK(k), cfg)?;
            let partition = round_partition(&sol.x, k, u, seed)?;
            Ok(KSweepPoint {
                k,
                density: density(u, &partition),
                partition,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = points.iter().map(|p| p.density).fold(f64::NEG_INFINITY, f64::max);
    let chosen = points
        .iter()
        .filter(|p| p.density >= best - 0.02 * best.abs())
        .map(|p| p.k)
        .min()
        .expect("non-empty sweep");
    Ok((chosen, points))
}
