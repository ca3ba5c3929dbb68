use crate::affinity::{nmi, Partition};
use crate::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Agreement between an estimated and an oracle clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub nmi: f64,
    /// `|a U_est + b - U_oracle|_F / |U_oracle|_F` with `a, b` fitted by
    /// least squares over all entries.
    pub affinity_rel_error: f64,
    /// Same residual over `|U_oracle - mean|_F`; 1 means no better than a
    /// constant.
    pub affinity_centered_error: f64,
    pub calibration_scale: f64,
    pub calibration_offset: f64,
    /// Spearman correlation of estimated and oracle subset scores.
    pub score_rank_correlation: f64,
}

/// Least-squares affine fit of `est` onto `oracle`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub scale: f64,
    pub offset: f64,
    pub rel_error: f64,
    pub centered_error: f64,
}

fn ratio(resid: f64, denom: f64) -> f64 {
    if denom > 0.0 {
        (resid / denom).sqrt()
    } else if resid == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn calibrated_rel_error(est: &DMatrix<f64>, oracle: &DMatrix<f64>) -> Result<Calibration> {
    if est.shape() != oracle.shape() || est.is_empty() {
        return Err(Error::Shape {
            expected: oracle.len(),
            got: est.len(),
        });
    }
    let mx = est.mean();
    let my = oracle.mean();
    let sxy: f64 = est.iter().zip(oracle.iter()).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = est.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = oracle.iter().map(|y| (y - my).powi(2)).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = my - a * mx;
    let resid: f64 = est
        .iter()
        .zip(oracle.iter())
        .map(|(x, y)| (a * x + b - y).powi(2))
        .sum();
    let yy: f64 = oracle.iter().map(|y| y * y).sum();
    Ok(Calibration {
        scale: a,
        offset: b,
        rel_error: ratio(resid, yy),
        centered_error: ratio(resid, syy),
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

pub fn compare(
    est_u: &DMatrix<f64>,
    oracle_u: &DMatrix<f64>,
    est_partition: &Partition,
    oracle_partition: &Partition,
    est_scores: &[f64],
    oracle_scores: &[f64],
) -> Result<Comparison> {
    let cal = calibrated_rel_error(est_u, oracle_u)?;
    if est_scores.len() != oracle_scores.len() {
        return Err(Error::Precondition(format!(
            "{} estimated scores against {} oracle scores",
            est_scores.len(),
            oracle_scores.len()
        )));
    }
    Ok(Comparison {
        nmi: nmi(est_partition, oracle_partition)?,
        affinity_rel_error: cal.rel_error,
        affinity_centered_error: cal.centered_error,
        calibration_scale: cal.scale,
        calibration_offset: cal.offset,
        score_rank_correlation: spearman(est_scores, oracle_scores),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_copies_have_zero_error() {
        let y = DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.1 + 0.5);
        let x = y.map(|v| 4.0 * v - 2.0);
        let c = calibrated_rel_error(&x, &y).unwrap();
        assert!(c.rel_error < 1e-12 && c.centered_error < 1e-12);
        assert!((c.scale - 0.25).abs() < 1e-12 && (c.offset - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unrelated_estimate_has_unit_error() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let x = DMatrix::from_element(2, 2, 3.0);
        let c = calibrated_rel_error(&x, &y).unwrap();
        // best constant is the mean 0.5: residual norm 1, |y| = sqrt 2
        assert!((c.centered_error - 1.0).abs() < 1e-12);
        assert!((c.rel_error - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_and_order() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 5.0]), 0.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![1.5, 0.0, 1.5]);
    }
}
