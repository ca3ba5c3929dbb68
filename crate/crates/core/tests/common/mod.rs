#![allow(dead_code)]

use gradex::affinity::{density, Partition};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Block affinity: 1 inside a group, 0 across, plus symmetric Gaussian noise.
pub fn planted(labels: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = labels.len();
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut u = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let base = if labels[i] == labels[j] { 1.0 } else { 0.0 };
            let v = base + if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            u[(i, j)] = v;
            u[(j, i)] = v;
        }
    }
    u
}

/// Random labels over `k` groups, each with at least two members.
pub fn random_labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(n >= 2 * k);
    let mut labels: Vec<usize> = (0..n).map(|i| if i < 2 * k { i / 2 } else { rng.random_range(0..k) }).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    labels
}

/// Every partition of `0..n` into exactly `k` non-empty groups, as
/// restricted growth strings.
pub fn for_each_partition(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    fn go(pos: usize, used: usize, n: usize, k: usize, labels: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if n - pos < k - used {
            return;
        }
        if pos == n {
            if used == k {
                f(labels);
            }
            return;
        }
        for c in 0..=used.min(k - 1) {
            labels[pos] = c;
            go(pos + 1, used.max(c + 1), n, k, labels, f);
        }
    }
    let mut labels = vec![0; n];
    go(0, 0, n, k, &mut labels, &mut f);
}

/// Density maximizer over all `k`-group partitions.
pub fn best_partition(u: &DMatrix<f64>, k: usize) -> Partition {
    let n = u.nrows();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut sums = vec![0.0; k];
    let mut sizes = vec![0usize; k];
    for_each_partition(n, k, |labels| {
        sums.iter_mut().for_each(|s| *s = 0.0);
        sizes.iter_mut().for_each(|s| *s = 0);
        for i in 0..n {
            sizes[labels[i]] += 1;
            for j in 0..n {
                if labels[i] == labels[j] {
                    sums[labels[i]] += u[(i, j)];
                }
            }
        }
        let d: f64 = sums.iter().zip(&sizes).map(|(s, &c)| s / c as f64).sum();
        if d > best.0 {
            best = (d, labels.to_vec());
        }
    });
    let p = Partition::from_labels(&best.1).unwrap();
    debug_assert!((density(u, &p) - best.0).abs() < 1e-9);
    p
}

pub fn stirling2(n: usize, k: usize) -> usize {
    let mut count = 0;
    for_each_partition(n, k, |_| count += 1);
    count
}

/// The 50 planted block instances (n in 6..=12, k in 2..=4, noise 0.25)
/// used to judge the relaxation against enumeration.
pub fn relaxation_corpus() -> Vec<(DMatrix<f64>, usize)> {
    use rand::SeedableRng;
    (0..50u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = rng.random_range(6..=12);
            let k = rng.random_range(2..=(n / 2).min(4));
            let labels = random_labels(n, k, &mut rng);
            (planted(&labels, 0.25, &mut rng), k)
        })
        .collect()
}
