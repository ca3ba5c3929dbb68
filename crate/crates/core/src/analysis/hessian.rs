use super::taylor::{mean_std, PolicyBatch};
use crate::linalg::{dot, norm2};
use crate::net::{hvp, hvp_step, BatchLoss, PolicyParams};
use crate::rng::{rng_from, tag};
use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub trace: f64,
    pub probes: usize,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceMethod {
    #[default]
    Hutchinson,
    HutchPlusPlus,
}

fn rademacher(p: usize, seed: u64, probe: usize) -> Vec<f64> {
    let mut rng = rng_from(seed, &[tag::HESSIAN, probe as u64]);
    (0..p).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn probe_hvp<L: BatchLoss + ?Sized>(loss: &L, theta: &[f64], v: &[f64], probe: usize) -> Result<Vec<f64>> {
    hvp(loss, theta, v, hvp_step(theta, v))
        .map(|g| g.0)
        .map_err(|e| Error::Precondition(format!("hessian-vector product failed on probe {probe}: {e}")))
}

/// Plain Hutchinson estimate `mean_i v_i^T H v_i` with Rademacher probes.
pub fn hutchinson<L: BatchLoss + ?Sized>(loss: &L, theta: &[f64], probes: usize, seed: u64) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::config("probes", "must be at least 1"));
    }
    let p = loss.dim();
    let samples = (0..probes)
        .into_par_iter()
        .map(|i| {
            let v = rademacher(p, seed, i);
            Ok(dot(&v, &probe_hvp(loss, theta, &v, i)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(summarize(0.0, &samples))
}

fn summarize(offset: f64, samples: &[f64]) -> TraceEstimate {
    let (mean, std) = mean_std(samples);
    let n = samples.len();
    // Unbiased sample deviation for the standard error.
    let se = if n > 1 { std * (n as f64 / (n - 1) as f64).sqrt() / (n as f64).sqrt() } else { 0.0 };
    TraceEstimate {
        trace: offset + mean,
        probes: n,
        std_error: se,
    }
}

/// Hutch++: a third of the probes sketch the dominant range of `H`, whose
/// trace is taken exactly; the rest estimate the deflated remainder.
pub fn hutch_pp<L: BatchLoss + ?Sized>(loss: &L, theta: &[f64], probes: usize, seed: u64) -> Result<TraceEstimate> {
    if probes < 3 {
        return Err(Error::config("probes", "Hutch++ needs at least 3 probes"));
    }
    let p = loss.dim();
    let k = probes / 3;
    let sketch = (0..k)
        .into_par_iter()
        .map(|i| probe_hvp(loss, theta, &rademacher(p, seed, i), i))
        .collect::<Result<Vec<_>>>()?;
    let hs = DMatrix::from_fn(p, k, |r, c| sketch[c][r]);
    let q = hs.qr().q();
    let basis: Vec<Vec<f64>> = (0..q.ncols()).map(|c| q.column(c).iter().copied().collect()).collect();
    let exact: f64 = basis
        .par_iter()
        .enumerate()
        .map(|(c, qc)| Ok(dot(qc, &probe_hvp(loss, theta, qc, k + c)?)))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    let deflate = |mut v: Vec<f64>| {
        for qc in &basis {
            let a = dot(qc, &v);
            v.iter_mut().zip(qc).for_each(|(x, q)| *x -= a * q);
        }
        v
    };
    let rest = probes - 2 * k;
    let samples = (0..rest)
        .into_par_iter()
        .map(|i| {
            let idx = 2 * k + i;
            let g = deflate(rademacher(p, seed, idx));
            let hg = deflate(probe_hvp(loss, theta, &g, idx)?);
            Ok(dot(&g, &hg))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut est = summarize(exact, &samples);
    est.probes = probes;
    Ok(est)
}

pub fn estimate_trace<L: BatchLoss + ?Sized>(
    loss: &L,
    theta: &[f64],
    probes: usize,
    method: TraceMethod,
    seed: u64,
) -> Result<TraceEstimate> {
    match method {
        TraceMethod::Hutchinson => hutchinson(loss, theta, probes, seed),
        TraceMethod::HutchPlusPlus => hutch_pp(loss, theta, probes, seed),
    }
}

/// Largest-magnitude Hessian eigenvalue by power iteration (Rayleigh quotient
/// of the last iterate).
pub fn top_eigenvalue<L: BatchLoss + ?Sized>(loss: &L, theta: &[f64], iters: usize, seed: u64) -> Result<f64> {
    let mut v = rademacher(loss.dim(), seed, usize::MAX);
    let mut lambda = 0.0;
    for i in 0..iters.max(1) {
        let n = norm2(&v);
        if n == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= n);
        let hv = probe_hvp(loss, theta, &v, i)?;
        lambda = dot(&v, &hv);
        v = hv;
    }
    Ok(lambda)
}

/// Policy-gradient surrogate loss over fixed samples, each clipped to
/// `[0, cap]`. A sample with advantage `A` costs `A (-log pi(a|s))` when
/// `A > 0` and `|A| (-log(1 - pi(a|s)))` when `A < 0`.
#[derive(Debug, Clone)]
pub struct PgLoss {
    pub batch: PolicyBatch,
    pub advantages: Vec<f64>,
    pub cap: f64,
}

impl PgLoss {
    pub fn new(batch: PolicyBatch, advantages: Vec<f64>, cap: f64) -> Result<Self> {
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::config("loss_cap", format!("must be positive, got {cap}")));
        }
        if batch.is_empty() || advantages.len() != batch.len() {
            return Err(Error::Precondition("loss needs a non-empty batch with one advantage per sample".into()));
        }
        Ok(PgLoss { batch, advantages, cap })
    }

    pub fn n(&self) -> usize {
        self.batch.len()
    }

    /// Per-sample loss and its derivative with respect to `log pi(a|s)`.
    fn sample(&self, lp: f64, adv: f64) -> (f64, f64) {
        let (l, dl) = if adv > 0.0 {
            (-adv * lp, -adv)
        } else if adv < 0.0 {
            // -log(1 - e^lp) and its derivative e^lp / (1 - e^lp).
            let q = -lp.exp_m1();
            (-adv.abs() * q.ln(), adv.abs() * lp.exp() / q)
        } else {
            (0.0, 0.0)
        };
        if !l.is_finite() || l >= self.cap {
            (self.cap, 0.0)
        } else {
            (l.max(0.0), dl)
        }
    }

    fn pass(&self, theta: &[f64], with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let net = PolicyParams::new(self.batch.layer_sizes.clone(), theta.to_vec())?;
        let n = self.n();
        let k = net.output_dim();
        let (acts, logp) = net.log_probs(&self.batch.states, n)?;
        let mut total = 0.0;
        let mut d_out = vec![0.0; if with_grad { n * k } else { 0 }];
        for (b, (&a, &adv)) in self.batch.actions.iter().zip(&self.advantages).enumerate() {
            let row = &logp[b * k..(b + 1) * k];
            let (l, dl) = self.sample(row[a], adv);
            total += l;
            if with_grad && dl != 0.0 {
                let d = &mut d_out[b * k..(b + 1) * k];
                for (j, lp) in row.iter().enumerate() {
                    d[j] = -dl * lp.exp() / n as f64;
                }
                d[a] += dl / n as f64;
            }
        }
        let grad = if with_grad { net.backward(&acts, &d_out)? } else { Vec::new() };
        Ok((total / n as f64, grad))
    }
}

impl BatchLoss for PgLoss {
    fn dim(&self) -> usize {
        PolicyParams::count(&self.batch.layer_sizes)
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.pass(theta, false)?.0)
    }

    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.pass(theta, true)?.1)
    }
}

/// `(1 + eps) L + (1 + eps) sqrt(C H / n) + eps`.
pub fn bound_value(train_loss: f64, cap: f64, h: f64, n: usize, eps: f64) -> f64 {
    (1.0 + eps) * train_loss + (1.0 + eps) * complexity_term(cap, h, n) + eps
}

pub fn complexity_term(cap: f64, h: f64, n: usize) -> f64 {
    (cap * h / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralizationConfig {
    pub loss_cap: f64,
    pub epsilon: f64,
    pub probes: usize,
    pub method: TraceMethod,
}

impl Default for GeneralizationConfig {
    fn default() -> Self {
        GeneralizationConfig {
            loss_cap: 5.0,
            epsilon: 0.1,
            probes: 50,
            method: TraceMethod::Hutchinson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub trace: TraceEstimate,
    pub train_loss: f64,
    pub test_loss: f64,
    pub gap: f64,
    /// `max(0, theta^T H theta)` on the held-out loss.
    pub quadratic_form: f64,
    pub n: usize,
    pub loss_cap: f64,
    pub epsilon: f64,
    pub bound: f64,
    /// The asymptotic remainder of the bound is not included.
    pub remainder_omitted: bool,
}

/// Train and held-out losses at `theta`, the Hessian trace and quadratic form
/// of the held-out loss, and the resulting bound value.
pub fn generalization_report(
    theta: &[f64],
    train: &PgLoss,
    held_out: &PgLoss,
    cfg: &GeneralizationConfig,
    seed: u64,
) -> Result<HessianReport> {
    if !(cfg.loss_cap > 0.0 && cfg.loss_cap.is_finite()) {
        return Err(Error::config("loss_cap", "must be positive"));
    }
    if !(cfg.epsilon >= 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::config("epsilon", "must be non-negative"));
    }
    let train = PgLoss {
        cap: cfg.loss_cap,
        ..train.clone()
    };
    let held_out = PgLoss {
        cap: cfg.loss_cap,
        ..held_out.clone()
    };
    let train_loss = train.loss(theta)?;
    let test_loss = held_out.loss(theta)?;
    let trace = estimate_trace(&held_out, theta, cfg.probes, cfg.method, seed)?;
    let quadratic_form = dot(theta, &probe_hvp(&held_out, theta, theta, usize::MAX)?).max(0.0);
    let n = train.n();
    Ok(HessianReport {
        trace,
        train_loss,
        test_loss,
        gap: test_loss - train_loss,
        quadratic_form,
        n,
        loss_cap: cfg.loss_cap,
        epsilon: cfg.epsilon,
        bound: bound_value(train_loss, cfg.loss_cap, quadratic_form, n, cfg.epsilon),
        remainder_omitted: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `0.5 theta^T A theta` with `A = R diag(d) R^T`.
    struct Quadratic {
        a: DMatrix<f64>,
    }

    impl Quadratic {
        fn diagonal(d: &[f64]) -> Self {
            Quadratic {
                a: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
            }
        }

        fn rotated(d: &[f64], seed: u64) -> Self {
            let n = d.len();
            let mut rng = rng_from(seed, &[]);
            let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let r = g.qr().q();
            let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d));
            Quadratic {
                a: &r * diag * r.transpose(),
            }
        }
    }

    impl BatchLoss for Quadratic {
        fn dim(&self) -> usize {
            self.a.nrows()
        }
        fn loss(&self, theta: &[f64]) -> Result<f64> {
            let t = nalgebra::DVector::from_column_slice(theta);
            Ok(0.5 * t.dot(&(&self.a * &t)))
        }
        fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
            let t = nalgebra::DVector::from_column_slice(theta);
            Ok((&self.a * t).iter().copied().collect())
        }
    }

    fn one_to_ten() -> Vec<f64> {
        (1..=10).map(f64::from).collect()
    }

    #[test]
    fn diagonal_trace_within_five_percent() {
        let q = Quadratic::diagonal(&one_to_ten());
        let est = hutchinson(&q, &[0.0; 10], 200, 1).unwrap();
        assert!((est.trace - 55.0).abs() <= 0.05 * 55.0, "{est:?}");
        assert_eq!(est.probes, 200);
        // Rademacher probes are exact on diagonal matrices.
        assert!(est.std_error < 1e-6);
    }

    #[test]
    fn zero_loss_has_zero_trace() {
        let q = Quadratic::diagonal(&[0.0; 6]);
        let est = hutchinson(&q, &[0.3; 6], 10, 2).unwrap();
        assert_eq!(est.trace, 0.0);
        assert!(hutchinson(&q, &[0.3; 6], 0, 2).is_err());
    }

    #[test]
    fn unbiased_on_rotated_quadratic() {
        let q = Quadratic::rotated(&one_to_ten(), 7);
        let means: Vec<f64> = (0..50)
            .map(|run| hutchinson(&q, &[0.1; 10], 50, 1000 + run).unwrap().trace)
            .collect();
        let mean = means.iter().sum::<f64>() / 50.0;
        assert!((mean - 55.0).abs() <= 0.01 * 55.0, "mean {mean}");
    }

    #[test]
    fn hutch_pp_agrees_with_hutchinson() {
        for q in [Quadratic::diagonal(&one_to_ten()), Quadratic::rotated(&one_to_ten(), 3)] {
            let a = hutchinson(&q, &[0.0; 10], 200, 5).unwrap();
            let b = hutch_pp(&q, &[0.0; 10], 200, 6).unwrap();
            let sigma = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
            assert!((a.trace - b.trace).abs() <= 2.0 * sigma + 1e-6, "{a:?} {b:?}");
            // With a full sketch the remainder vanishes.
            let c = hutch_pp(&q, &[0.0; 10], 60, 6).unwrap();
            assert!((c.trace - 55.0).abs() < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        let q = Quadratic::rotated(&one_to_ten(), 9);
        let l = top_eigenvalue(&q, &[0.0; 10], 300, 1).unwrap();
        assert!((l - 10.0).abs() < 1e-3, "{l}");
    }

    #[test]
    fn bound_golden_values() {
        assert_eq!(bound_value(0.0, 5.0, 0.0, 10, 0.0), 0.0);
        assert!((bound_value(0.5, 5.0, 2.0, 10, 0.1) - (1.1 * 0.5 + 1.1 * 1.0 + 0.1)).abs() < 1e-15);
        assert!((bound_value(0.2, 4.0, 9.0, 100, 0.1) - (0.22 + 1.1 * 0.6 + 0.1)).abs() < 1e-15);
        let r = complexity_term(5.0, 3.0, 100) / complexity_term(5.0, 3.0, 200);
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
    }

    fn toy_loss(seed: u64, n: usize) -> (PgLoss, Vec<f64>) {
        let sizes = vec![2, 6, 4];
        let mut rng = rng_from(seed, &[]);
        let net = PolicyParams::init(sizes.clone(), &mut rng).unwrap();
        let batch = PolicyBatch {
            layer_sizes: sizes,
            states: (0..2 * n).map(|_| rng.random::<f64>()).collect(),
            actions: (0..n).map(|_| rng.random_range(0..4)).collect(),
        };
        let adv = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        (PgLoss::new(batch, adv, 5.0).unwrap(), net.into_theta())
    }

    #[test]
    fn pg_loss_gradient_matches_finite_differences() {
        let (loss, theta) = toy_loss(4, 30);
        let g = loss.grad(&theta).unwrap();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut up = theta.clone();
            up[i] += h;
            let mut dn = theta.clone();
            dn[i] -= h;
            let fd = (loss.loss(&up).unwrap() - loss.loss(&dn).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", g[i]);
        }
        let l = loss.loss(&theta).unwrap();
        assert!((0.0..=5.0).contains(&l));
    }

    #[test]
    fn identical_sets_have_zero_gap() {
        let (loss, theta) = toy_loss(5, 40);
        let cfg = GeneralizationConfig {
            probes: 4,
            ..Default::default()
        };
        let r = generalization_report(&theta, &loss, &loss, &cfg, 1).unwrap();
        assert_eq!(r.gap, 0.0);
        assert_eq!(r.n, 40);
        assert!(r.bound >= r.train_loss);
        let bad = GeneralizationConfig { loss_cap: 0.0, ..cfg };
        assert!(generalization_report(&theta, &loss, &loss, &bad, 1).is_err());
    }
}
