use crate::linalg::gemm;
use crate::rng::{rng_from, tag};
use crate::{Error, Result};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Dense Gaussian sketch `P` of shape `p x d`, entries `N(0, 1/d)`, stored
/// row-major and regenerated bit-identically from `(p, d, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    seed: u64,
    p: usize,
    d: usize,
    entries: Vec<f64>,
}

pub fn make_projection(p: usize, d: usize, seed: u64) -> Result<ProjectionMatrix> {
    if d == 0 || d > p {
        return Err(Error::Precondition(format!(
            "projection dimension d = {d} must lie in 1..=p, p = {p}"
        )));
    }
    let mut rng = rng_from(seed, &[tag::PROJECTION, p as u64, d as u64]);
    let scale = 1.0 / (d as f64).sqrt();
    let entries = (0..p * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Ok(ProjectionMatrix { seed, p, d, entries })
}

impl ProjectionMatrix {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Rows, the parameter dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Columns, the sketch dimension.
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `P^T g`.
    pub fn project(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.project_rows(g, 1)
    }

    /// Projects `rows` row-major vectors of length `p` at once.
    pub fn project_rows(&self, grads: &[f64], rows: usize) -> Result<Vec<f64>> {
        if grads.len() != rows * self.p {
            return Err(Error::Shape {
                expected: rows * self.p,
                got: grads.len(),
            });
        }
        let mut out = vec![0.0; rows * self.d];
        gemm(
            rows,
            self.p,
            self.d,
            1.0,
            grads,
            (self.p, 1),
            &self.entries,
            (self.d, 1),
            0.0,
            &mut out,
            (self.d, 1),
        );
        Ok(out)
    }

    /// `P x` for a sketch-space vector, mapping back to parameter space.
    pub fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::Shape {
                expected: self.d,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.p];
        gemm(self.p, self.d, 1, 1.0, &self.entries, (self.d, 1), x, (1, 1), 0.0, &mut out, (1, 1));
        Ok(out)
    }

    /// Multiply-add cost of projecting one vector.
    pub fn flops_per_row(&self) -> u64 {
        2 * (self.p * self.d) as u64
    }
}
