use crate::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxMode {
    /// `tr X = k`, no trace penalty.
    FixedK(usize),
    /// Trace penalty `lambda tr X`, no trace constraint.
    Auto(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub polish_iter: usize,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        RelaxConfig {
            tol: 1e-6,
            max_iter: 20_000,
            polish_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residuals {
    /// `|X e - e|_inf`.
    pub row_sum: f64,
    pub min_eigenvalue: f64,
    pub min_entry: f64,
    /// `|tr X - k|` in fixed-k mode, 0 otherwise.
    pub trace: f64,
}

impl Residuals {
    fn worst(&self) -> f64 {
        self.row_sum
            .max(-self.min_eigenvalue)
            .max(-self.min_entry)
            .max(self.trace)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationSolution {
    pub x: DMatrix<f64>,
    /// `<U, X> - lambda tr X`.
    pub objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
    pub converged: bool,
    /// Eigenvalues of `X` above one half, a read-out of the cluster count.
    pub effective_k: usize,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sym(m));
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&clipped) * v.transpose()
}

fn project_nonneg(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| x.max(0.0))
}

/// Nearest symmetric matrix with unit row sums and, if given, trace `k`:
/// `S + (a e^T + e a^T)/2 + t I`.
fn project_affine(m: &DMatrix<f64>, k: Option<usize>) -> DMatrix<f64> {
    let n = m.nrows();
    let nf = n as f64;
    let s = sym(m);
    let se: Vec<f64> = (0..n).map(|i| s.row(i).sum()).collect();
    let ese: f64 = se.iter().sum();
    let t = match k {
        Some(k) if n > 1 => (k as f64 - s.trace() - 1.0 + ese / nf) / (nf - 1.0),
        _ => 0.0,
    };
    let sa = (nf - ese) / nf - t;
    let a: Vec<f64> = se.iter().map(|v| (2.0 / nf) * (1.0 - v - t) - sa / nf).collect();
    let mut out = s;
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] += 0.5 * (a[i] + a[j]);
        }
        out[(i, i)] += t;
    }
    out
}

fn residuals(x: &DMatrix<f64>, k: Option<usize>) -> Residuals {
    let n = x.nrows();
    let row_sum = (0..n).map(|i| (x.row(i).sum() - 1.0).abs()).fold(0.0, f64::max);
    let eig = SymmetricEigen::new(sym(x));
    Residuals {
        row_sum,
        min_eigenvalue: eig.eigenvalues.min(),
        min_entry: x.min(),
        trace: k.map_or(0.0, |k| (x.trace() - k as f64).abs()),
    }
}

/// Maximizes `<U, X> - lambda tr X` over symmetric `X` with `X e = e`,
/// `X` positive semidefinite and entrywise non-negative (plus `tr X = k` in
/// fixed-k mode).
///
/// Consensus ADMM splits the three constraint sets; a final round of
/// Dykstra projections pulls the iterate onto their intersection.
pub fn solve_relaxation(u: &DMatrix<f64>, mode: RelaxMode, cfg: &RelaxConfig) -> Result<RelaxationSolution> {
    let n = u.nrows();
    if n == 0 || u.ncols() != n {
        return Err(Error::Shape {
            expected: n,
            got: u.ncols(),
        });
    }
    if let Some((i, _)) = u.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::numeric("affinity", i));
    }
    let asym = (u - u.transpose()).abs().max();
    if asym > 1e-9 * u.abs().max().max(1.0) {
        return Err(Error::Precondition(format!("affinity is not symmetric (gap {asym:.3e})")));
    }
    let (k, lambda) = match mode {
        RelaxMode::FixedK(k) => {
            if k == 0 || k > n {
                return Err(Error::Precondition(format!("k = {k} must lie in 1..={n}")));
            }
            (Some(k), 0.0)
        }
        RelaxMode::Auto(lambda) => {
            if !lambda.is_finite() {
                return Err(Error::config("lambda", "must be finite"));
            }
            (None, lambda)
        }
    };

    // <cJ, X> = c n on the feasible set, so centering changes nothing but
    // the conditioning.
    let mean = u.mean();
    let mut c = u.map(|x| x - mean) - DMatrix::identity(n, n) * lambda;
    let scale = c.abs().max();
    if scale > 0.0 {
        c /= scale;
    }

    let mut x = DMatrix::identity(n, n) * (k.unwrap_or(n) as f64 / n as f64);
    x = project_affine(&x, k);
    let mut y = x.clone();
    let mut z = x.clone();
    let mut l1 = DMatrix::<f64>::zeros(n, n);
    let mut l2 = DMatrix::<f64>::zeros(n, n);
    let mut rho = 1.0;
    let mut iterations = 0;
    let mut admm_done = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        let target = ((&y - &l1) + (&z - &l2)) * 0.5 + &c * (0.5 / rho);
        x = project_affine(&target, k);
        let y_prev = std::mem::replace(&mut y, project_psd(&(&x + &l1)));
        let z_prev = std::mem::replace(&mut z, project_nonneg(&(&x + &l2)));
        l1 += &x - &y;
        l2 += &x - &z;
        let primal = (&x - &y).norm().max((&x - &z).norm());
        let dual = rho * ((&y - &y_prev) + (&z - &z_prev)).norm();
        let scale_x = 1.0 + x.norm();
        if primal <= 0.1 * cfg.tol * scale_x && dual <= 0.1 * cfg.tol * scale_x {
            admm_done = true;
            break;
        }
        if iterations % 10 == 0 {
            let factor = if primal > 10.0 * dual {
                2.0
            } else if dual > 10.0 * primal {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                rho *= factor;
                l1 /= factor;
                l2 /= factor;
            }
        }
    }

    // Dykstra on the three sets starting from the consensus point.
    let mut cur = x.clone();
    let mut p_a = DMatrix::<f64>::zeros(n, n);
    let mut p_psd = DMatrix::<f64>::zeros(n, n);
    let mut p_nn = DMatrix::<f64>::zeros(n, n);
    let mut res = residuals(&project_affine(&cur, k), k);
    for _ in 0..cfg.polish_iter {
        if res.worst() <= 1e-9 {
            break;
        }
        let a = project_affine(&(&cur + &p_a), k);
        p_a = &cur + &p_a - &a;
        let b = project_psd(&(&a + &p_psd));
        p_psd = &a + &p_psd - &b;
        let nn = project_nonneg(&(&b + &p_nn));
        p_nn = &b + &p_nn - &nn;
        cur = nn;
        res = residuals(&project_affine(&cur, k), k);
    }
    let x = project_affine(&cur, k);
    let residuals = residuals(&x, k);
    let objective = u.component_mul(&x).sum() - lambda * x.trace();
    let converged = admm_done && residuals.worst() <= 1e-4;
    if !converged {
        log::warn!(
            "relaxation stopped after {iterations} iterations with residual {:.3e}",
            residuals.worst()
        );
    }
    let effective_k = SymmetricEigen::new(x.clone()).eigenvalues.iter().filter(|&&l| l > 0.5).count();
    Ok(RelaxationSolution {
        x,
        objective,
        residuals,
        iterations,
        converged,
        effective_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(sizes: &[usize]) -> DMatrix<f64> {
        let n: usize = sizes.iter().sum();
        let mut label = Vec::new();
        for (g, &s) in sizes.iter().enumerate() {
            label.extend(std::iter::repeat_n(g, s));
        }
        DMatrix::from_fn(n, n, |i, j| if label[i] == label[j] { 1.0 } else { 0.0 })
    }

    fn assert_feasible(s: &RelaxationSolution) {
        assert!(s.residuals.row_sum <= 1e-6, "{:?}", s.residuals);
        assert!(s.residuals.min_eigenvalue >= -1e-6, "{:?}", s.residuals);
        assert!(s.residuals.min_entry >= -1e-8, "{:?}", s.residuals);
    }

    #[test]
    fn affine_projection_hits_row_sums_and_trace() {
        let m = DMatrix::from_fn(5, 5, |i, j| ((i * 3 + j * 7) % 5) as f64 * 0.3 - 0.4);
        let p = project_affine(&m, Some(2));
        for i in 0..5 {
            assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
        }
        assert!((p.trace() - 2.0).abs() < 1e-12);
        assert!((&p - p.transpose()).abs().max() < 1e-15);
        // Idempotent.
        assert!((project_affine(&p, Some(2)) - &p).abs().max() < 1e-12);
    }

    #[test]
    fn two_blocks_of_two() {
        let u = block(&[2, 2]);
        let s = solve_relaxation(&u, RelaxMode::FixedK(2), &RelaxConfig::default()).unwrap();
        assert!(s.converged);
        assert_feasible(&s);
        let expect = DMatrix::from_fn(4, 4, |i, j| if i / 2 == j / 2 { 0.5 } else { 0.0 });
        assert!((&s.x - expect).abs().max() <= 1e-4, "{}", s.x);
        assert!((s.objective - 4.0).abs() <= 1e-4);
    }

    #[test]
    fn all_ones_single_cluster() {
        let u = DMatrix::from_element(5, 5, 1.0);
        let s = solve_relaxation(&u, RelaxMode::FixedK(1), &RelaxConfig::default()).unwrap();
        assert_feasible(&s);
        assert!((&s.x - DMatrix::from_element(5, 5, 0.2)).abs().max() <= 1e-4);
        assert!((s.objective - 5.0).abs() <= 1e-4);
    }

    #[test]
    fn trace_penalty_recovers_two_blocks() {
        let u = block(&[2, 2]);
        let s = solve_relaxation(&u, RelaxMode::Auto(1.0), &RelaxConfig::default()).unwrap();
        assert_feasible(&s);
        assert_eq!(s.effective_k, 2);
        let expect = DMatrix::from_fn(4, 4, |i, j| if i / 2 == j / 2 { 0.5 } else { 0.0 });
        assert!((&s.x - expect).abs().max() <= 1e-4, "{}", s.x);
    }

    #[test]
    fn rejects_bad_input() {
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(solve_relaxation(&u, RelaxMode::FixedK(1), &RelaxConfig::default()).is_err());
        let u = DMatrix::identity(3, 3);
        assert!(solve_relaxation(&u, RelaxMode::FixedK(4), &RelaxConfig::default()).is_err());
    }
}
