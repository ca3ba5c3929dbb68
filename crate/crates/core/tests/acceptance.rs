//! One PASS/FAIL line per acceptance criterion on the pinned planted run.
//!
//! `cargo test -p gradex --release --test acceptance`; the pinned run takes
//! several minutes, most of it in the fine-tuning oracle.

mod common;

use common::{best_partition, relaxation_corpus};
use gradex::affinity::{round_partition, solve_relaxation, RelaxConfig, RelaxMode};
use gradex::analysis::{hutch_pp, hutchinson};
use gradex::gradex::{extract_features, make_projection, ExtractConfig, LogisticProblem, SolverConfig};
use gradex::io;
use gradex::net::BatchLoss;
use gradex::pipeline::{
    file, hessian_stage, load_meta, read_subsets, run_oracle, run_pipeline, taylor_stage, Artifacts, FlopsReport,
    RunConfig,
};
use gradex::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

const PINNED: &str = include_str!("../../../configs/planted.json");

struct Line {
    id: u8,
    name: &'static str,
    pass: Option<bool>,
    detail: String,
}

fn line(id: u8, name: &'static str, outcome: Result<(bool, String)>) -> Line {
    match outcome {
        Ok((pass, detail)) => Line {
            id,
            name,
            pass: Some(pass),
            detail,
        },
        Err(e) => Line {
            id,
            name,
            pass: Some(false),
            detail: format!("error: {e}"),
        },
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

struct PinnedRun {
    cfg: RunConfig,
    pipeline_time: Duration,
    oracle_time: Duration,
    nmi: f64,
    rel_error: f64,
    centered_error: f64,
    rank_corr: f64,
    flops: FlopsReport,
}

fn pinned_run(out: &Path) -> Result<PinnedRun> {
    let cfg = RunConfig::from_json(PINNED)?.resolved();
    let t = Instant::now();
    let report = run_pipeline(&cfg, out)?;
    let pipeline_time = t.elapsed();
    let art = Artifacts::new(out);
    let subsets = read_subsets(&art.path(file::SUBSETS), report.checksum)?;
    let t = Instant::now();
    let oracle = run_oracle(&cfg, out, &subsets)?;
    let oracle_time = t.elapsed();
    let cmp = oracle
        .comparison
        .ok_or_else(|| gradex::Error::Precondition("oracle wrote no comparison".into()))?;
    let flops = io::read_json::<io::Stamped<FlopsReport>>(&art.path(file::FLOPS))?.checked(
        &art.path(file::FLOPS),
        report.checksum,
    )?;
    println!(
        "       pinned run: estimate {:?}, oracle {:?}",
        report.partition.groups(),
        oracle.partition.groups()
    );
    Ok(PinnedRun {
        cfg,
        pipeline_time,
        oracle_time,
        nmi: cmp.nmi,
        rel_error: cmp.affinity_rel_error,
        centered_error: cmp.affinity_centered_error,
        rank_corr: cmp.score_rank_correlation,
        flops,
    })
}

fn taylor_fidelity(run: &PinnedRun, out: &Path) -> Result<(bool, String)> {
    let suite = run.cfg.validate()?;
    let art = Artifacts::new(out);
    let t = Instant::now();
    let rows = taylor_stage(&run.cfg, &suite, &art, &[0.001, 0.005, 0.01])?;
    let elapsed = t.elapsed();
    let at = |d: f64| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.target_distance == d)
            .map(|r| r.report.mean_rss)
            .collect()
    };
    let (near, mid, far) = (at(0.001), at(0.005), at(0.01));
    let worst = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let monotone = (0..near.len())
        .filter(|&i| near[i] <= mid[i] && mid[i] <= far[i])
        .count();
    let pass = near.len() == 5
        && worst(&near) <= 0.005
        && worst(&far) <= 0.05
        && elapsed < Duration::from_secs(120);
    Ok((
        pass,
        format!(
            "worst rss {:.2e}% at 0.1%, {:.2e}% at 1.0% over {} seeds (limits 0.5%, 5%); monotone {}/{}; {:.1}s",
            100.0 * worst(&near),
            100.0 * worst(&far),
            near.len(),
            monotone,
            near.len(),
            secs(elapsed)
        ),
    ))
}

fn clustering_fidelity(run: &PinnedRun) -> (bool, String) {
    let pass = run.nmi >= 0.6 && run.oracle_time <= Duration::from_secs(1800) && run.pipeline_time <= Duration::from_secs(180);
    (
        pass,
        format!(
            "nmi {:.3} (min 0.6); pipeline {:.1}s (max 180), oracle {:.1}s (max 1800)",
            run.nmi,
            secs(run.pipeline_time),
            secs(run.oracle_time)
        ),
    )
}

fn affinity_error(run: &PinnedRun) -> (bool, String) {
    (
        run.rel_error <= 0.3,
        format!(
            "calibrated |U_est - U_oracle| / |U_oracle| = {:.3} (max 0.3); centered {:.3}; subset rank corr {:.3}",
            run.rel_error, run.centered_error, run.rank_corr
        ),
    )
}

fn speedup(run: &PinnedRun) -> (bool, String) {
    let ratio = run.flops.ratio.unwrap_or(0.0);
    (
        ratio >= 10.0,
        format!(
            "oracle {:.3e} / pipeline {:.3e} flops = {:.1} (min 10)",
            run.flops.oracle.unwrap_or(0) as f64,
            run.flops.pipeline as f64,
            ratio
        ),
    )
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize, ridge: f64) -> LogisticProblem {
    let rows: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    let labels = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let weights = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
    LogisticProblem::new(d, rows, labels, weights, ridge).unwrap()
}

/// Minimizer of `w log(1 + exp(-y x.delta)) + ridge |delta|^2`: it lies on
/// `y x`, with margin `m` solving `m = a / (1 + exp(m))`, `a = w |x|^2 / (2 ridge)`.
fn one_record_minimizer(x: &[f64], y: f64, w: f64, ridge: f64) -> Vec<f64> {
    let xx: f64 = x.iter().map(|v| v * v).sum();
    let a = w * xx / (2.0 * ridge);
    let (mut lo, mut hi) = (0.0, a);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid < a / (1.0 + mid.exp()) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let m = 0.5 * (lo + hi);
    x.iter().map(|v| y * m * v / xx).collect()
}

fn surrogate_checks() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_fd: f64 = 0.0;
    let mut newton_ok = 0;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let d = rng.random_range(1..12);
        let p = random_problem(&mut rng, n, d, 1e-3);
        let at: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = p.gradient(&at);
        let h = 1e-5;
        let fd: Vec<f64> = (0..d)
            .map(|i| {
                let mut a = at.clone();
                let mut b = at.clone();
                a[i] += h;
                b[i] -= h;
                (p.objective(&a) - p.objective(&b)) / (2.0 * h)
            })
            .collect();
        let num: f64 = g.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        worst_fd = worst_fd.max(num / den);
        let fit = p.solve(&SolverConfig::default());
        worst_grad = worst_grad.max(fit.grad_norm);
        if fit.converged && fit.grad_norm <= 1e-8 {
            newton_ok += 1;
        }
    }
    let mut worst_closed: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(1..8);
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let w = rng.random_range(0.1..2.0);
        let ridge = 10f64.powf(rng.random_range(-3.0..0.0));
        let p = LogisticProblem::new(d, x.clone(), vec![y], vec![w], ridge)?;
        let fit = p.solve(&SolverConfig::default());
        let want = one_record_minimizer(&x, y, w, ridge);
        let err = fit.delta.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        worst_closed = worst_closed.max(err / scale);
    }
    let pass = worst_fd <= 1e-6 && newton_ok == 100 && worst_closed <= 1e-6;
    Ok((
        pass,
        format!(
            "fd rel err {worst_fd:.1e} (max 1e-6); newton converged {newton_ok}/100, worst |grad|_inf {worst_grad:.1e} (max 1e-8); one-record err {worst_closed:.1e} (max 1e-6)"
        ),
    ))
}

fn relaxation_checks() -> Result<(bool, String)> {
    let mut hits = 0;
    let mut worst: f64 = 0.0;
    let mut unconverged = 0;
    for (seed, (u, k)) in relaxation_corpus().into_iter().enumerate() {
        let sol = solve_relaxation(&u, RelaxMode::FixedK(k), &RelaxConfig::default())?;
        if sol.converged {
            let r = sol.residuals;
            worst = worst.max(r.row_sum).max(-r.min_eigenvalue).max(-r.min_entry).max(r.trace);
        } else {
            unconverged += 1;
        }
        if round_partition(&sol.x, k, &u, seed as u64)? == best_partition(&u, k) {
            hits += 1;
        }
    }
    Ok((
        hits >= 47 && worst <= 1e-6,
        format!("{hits}/50 match enumeration (min 47); worst residual {worst:.1e} (max 1e-6); {unconverged} unconverged"),
    ))
}

fn jl_property(out: &Path) -> Result<(bool, String)> {
    let cfg = RunConfig::from_json(PINNED)?.resolved();
    let suite = cfg.validate()?;
    let (policy, value) = load_meta(&Artifacts::new(out))?;
    let p = policy.dim();
    let d = 400;
    let proj = make_projection(p, d, 17)?;
    let ex = extract_features(
        &policy,
        &value,
        &suite,
        &proj,
        &ExtractConfig {
            steps_per_task: 64,
            debug: true,
            ..cfg.gradex.extract.clone()
        },
        5,
    )?;
    let dbg = ex.debug.expect("debug gradients requested");
    let rows = dbg.full.len() / p;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = rng.random_range(0..rows);
        let b = (a + rng.random_range(1..rows)) % rows;
        let (ga, gb) = (&dbg.full[a * p..(a + 1) * p], &dbg.full[b * p..(b + 1) * p]);
        let (pa, pb) = (&dbg.projected[a * d..(a + 1) * d], &dbg.projected[b * d..(b + 1) * d]);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
        let scale = (dot(ga, ga) * dot(gb, gb)).sqrt();
        let err = (dot(pa, pb) - dot(ga, gb)).abs() / scale.max(1e-300);
        worst = worst.max(err);
        if err <= 0.2 {
            ok += 1;
        }
    }
    Ok((
        p >= 10_000 && ok >= 95,
        format!("p = {p}, d = {d}: {ok}/100 pairs within 0.2 |a||b| (min 95); worst {worst:.3}"),
    ))
}

/// `0.5 theta^T A theta`.
struct Quadratic {
    a: DMatrix<f64>,
}

impl BatchLoss for Quadratic {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let t = DVector::from_column_slice(theta);
        Ok(0.5 * t.dot(&(&self.a * &t)))
    }

    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let t = DVector::from_column_slice(theta);
        Ok((&self.a * t).iter().copied().collect())
    }
}

fn hutchinson_checks() -> Result<(bool, String)> {
    let diag = DVector::from_fn(10, |i, _| (i + 1) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = DMatrix::<f64>::from_fn(10, 10, |_, _| StandardNormal.sample(&mut rng)).qr().q();
    let theta = vec![0.3; 10];
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, a) in [
        ("diag", DMatrix::from_diagonal(&diag)),
        ("rotated", &q * DMatrix::from_diagonal(&diag) * q.transpose()),
    ] {
        let loss = Quadratic { a };
        let h = hutchinson(&loss, &theta, 200, 11)?;
        let pp = hutch_pp(&loss, &theta, 200, 11)?;
        let rel = (h.trace - 55.0).abs() / 55.0;
        let sigma = (h.std_error.powi(2) + pp.std_error.powi(2)).sqrt();
        let agree = (h.trace - pp.trace).abs() <= 2.0 * sigma + 1e-9 * 55.0;
        pass &= rel <= 0.05 && agree;
        notes.push(format!(
            "{name}: hutchinson {:.3} ({:.2}% off, max 5%), hutch++ {:.3}, |diff| {:.3} vs 2 sigma {:.3}",
            h.trace,
            100.0 * rel,
            pp.trace,
            (h.trace - pp.trace).abs(),
            2.0 * sigma
        ));
    }
    Ok((pass, notes.join("; ")))
}

fn generalization(run: &PinnedRun, out: &Path) -> Result<(bool, String)> {
    let suite = run.cfg.validate()?;
    let h = hessian_stage(&run.cfg, &suite, &Artifacts::new(out))?;
    let r = &h.report;
    let pass = r.gap > 0.0 && r.bound >= r.gap && r.bound <= 100.0 * r.gap;
    Ok((
        pass,
        format!(
            "train {:.4}, held-out {:.4}, gap {:.4}, bound {:.4} (ratio {:.2}, need 1..100); trace {:.3} +- {:.3}",
            r.train_loss,
            r.test_loss,
            r.gap,
            r.bound,
            r.bound / r.gap,
            r.trace.trace,
            r.trace.std_error
        ),
    ))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let out = dir.path();
    let mut lines = Vec::new();

    let run = pinned_run(out);
    match &run {
        Ok(run) => {
            lines.push(line(1, "taylor fidelity", taylor_fidelity(run, out)));
            let (p, d) = clustering_fidelity(run);
            lines.push(line(2, "clustering fidelity", Ok((p, d))));
            lines.push(line(3, "affinity error", Ok(affinity_error(run))));
            lines.push(line(4, "flop speedup", Ok(speedup(run))));
        }
        Err(e) => {
            for (id, name) in [
                (1, "taylor fidelity"),
                (2, "clustering fidelity"),
                (3, "affinity error"),
                (4, "flop speedup"),
            ] {
                lines.push(line(id, name, Err(gradex::Error::Precondition(format!("pinned run failed: {e}")))));
            }
        }
    }
    lines.push(line(5, "surrogate solver", surrogate_checks()));
    lines.push(line(6, "relaxation solver", relaxation_checks()));
    lines.push(line(7, "projection inner products", jl_property(out)));
    lines.push(line(8, "hutchinson trace", hutchinson_checks()));
    match &run {
        Ok(run) => lines.push(line(9, "generalization bound", generalization(run, out))),
        Err(_) => lines.push(line(
            9,
            "generalization bound",
            Err(gradex::Error::Precondition("pinned run failed".into())),
        )),
    }
    lines.push(Line {
        id: 10,
        name: "absolute benchmark numbers",
        pass: None,
        detail: "out of scope: needs benchmark-scale environments and training".into(),
    });

    let mut failed = 0;
    for l in &lines {
        let tag = match l.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("{tag} [{:>2}] {}: {}", l.id, l.name, l.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
