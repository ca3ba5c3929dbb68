//! C interface to the affinity estimation and clustering routines.
//!
//! Every function returns a [`GxStatus`]. On failure the message is kept per
//! thread and can be copied out with [`gx_last_error_message`]. Objects are
//! handed out as opaque pointers and must be released with their `_free`
//! function. Task ids are zero-based.

use gradex::affinity::{self, AffinityMatrix, Partition, RelaxConfig, RelaxMode};
use gradex::gradex::{fit_surrogate, GradientStore, SolverConfig};
use gradex::Error;
use nalgebra::DMatrix;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Stale = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

/// Affinity matrix built from scored subsets.
pub struct GxAffinity(AffinityMatrix);

/// Grouping of tasks into disjoint clusters.
pub struct GxPartition(Partition);

/// Projected gradient store loaded from disk.
pub struct GxStore(GradientStore);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> GxStatus {
    match e.root() {
        Error::Numeric { .. } => GxStatus::Numeric,
        Error::Stale { .. } => GxStatus::Stale,
        Error::Io { .. } => GxStatus::Io,
        Error::Format(_) | Error::Json(_) => GxStatus::Format,
        _ => GxStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GxStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed as `{what}`"));
            GxStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            GxStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            GxStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn object<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn square(u: *const f64, n: usize) -> Result<DMatrix<f64>, Fail> {
    if n == 0 {
        return Err(Fail::Arg("matrix size must be positive".into()));
    }
    let values = slice(u, n * n, "u")?;
    Ok(DMatrix::from_row_slice(n, n, values))
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `cap - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn gx_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds the affinity matrix from `m` scored subsets. Subset `l` has
/// `lengths[l]` members stored consecutively in `members`.
///
/// # Safety
/// `members` holds `sum(lengths)` entries, `lengths` and `scores` hold `m`.
#[no_mangle]
pub unsafe extern "C" fn gx_affinity_build(
    n: usize,
    members: *const usize,
    lengths: *const usize,
    scores: *const f64,
    m: usize,
    out: *mut *mut GxAffinity,
) -> GxStatus {
    guard(|| {
        let lengths = slice(lengths, m, "lengths")?;
        let scores = slice(scores, m, "scores")?;
        let total = lengths.iter().sum();
        let members = slice(members, total, "members")?;
        let mut pairs = Vec::with_capacity(m);
        let mut at = 0;
        for (&len, &score) in lengths.iter().zip(scores) {
            pairs.push((members[at..at + len].to_vec(), score));
            at += len;
        }
        put(out, GxAffinity(affinity::build_affinity(&pairs, n)?))
    })
}

/// # Safety
/// `a` is a live handle; `n` is writable.
#[no_mangle]
pub unsafe extern "C" fn gx_affinity_n(a: *const GxAffinity, n: *mut usize) -> GxStatus {
    guard(|| {
        let a = object(a, "affinity")?;
        *n.as_mut().ok_or(Fail::Null("n"))? = a.0.n();
        Ok(())
    })
}

/// Row-major copy of the `n x n` values into `out`, which holds `len` entries.
///
/// # Safety
/// `a` is a live handle; `out` holds `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gx_affinity_values(a: *const GxAffinity, out: *mut f64, len: usize) -> GxStatus {
    guard(|| {
        let a = object(a, "affinity")?;
        let n = a.0.n();
        if len != n * n {
            return Err(Fail::Arg(format!("buffer holds {len} values, matrix has {}", n * n)));
        }
        let out = slice_mut(out, len, "out")?;
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = a.0.values[(i, j)];
            }
        }
        Ok(())
    })
}

/// Number of unordered task pairs (including diagonal) never seen together.
///
/// # Safety
/// `a` is a live handle; `count` is writable.
#[no_mangle]
pub unsafe extern "C" fn gx_affinity_missing_pairs(a: *const GxAffinity, count: *mut usize) -> GxStatus {
    guard(|| {
        let a = object(a, "affinity")?;
        *count.as_mut().ok_or(Fail::Null("count"))? = a.0.missing_pairs();
        Ok(())
    })
}

/// # Safety
/// `a` comes from [`gx_affinity_build`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gx_affinity_free(a: *mut GxAffinity) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Solves the relaxation with `tr X = k` for the row-major `n x n` matrix
/// `u`. Writes `X` row-major into `x_out` and the objective `<U, X>`.
///
/// # Safety
/// `u` and `x_out` hold `n * n` doubles; `objective` is writable or null.
#[no_mangle]
pub unsafe extern "C" fn gx_relax(
    u: *const f64,
    n: usize,
    k: usize,
    x_out: *mut f64,
    objective: *mut f64,
    converged: *mut bool,
) -> GxStatus {
    guard(|| {
        let u = square(u, n)?;
        let sol = affinity::solve_relaxation(&u, RelaxMode::FixedK(k), &RelaxConfig::default())?;
        let x_out = slice_mut(x_out, n * n, "x_out")?;
        for i in 0..n {
            for j in 0..n {
                x_out[i * n + j] = sol.x[(i, j)];
            }
        }
        if let Some(o) = objective.as_mut() {
            *o = sol.objective;
        }
        if let Some(c) = converged.as_mut() {
            *c = sol.converged;
        }
        Ok(())
    })
}

/// Rounds a relaxation solution `x` into `k` groups, breaking ties by
/// density under `u`.
///
/// # Safety
/// `x` and `u` hold `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn gx_round(
    x: *const f64,
    u: *const f64,
    n: usize,
    k: usize,
    seed: u64,
    out: *mut *mut GxPartition,
) -> GxStatus {
    guard(|| {
        let x = square(x, n)?;
        let u = square(u, n)?;
        put(out, GxPartition(affinity::round_partition(&x, k, &u, seed)?))
    })
}

/// Relaxation followed by rounding.
///
/// # Safety
/// `u` holds `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn gx_cluster(
    u: *const f64,
    n: usize,
    k: usize,
    seed: u64,
    out: *mut *mut GxPartition,
) -> GxStatus {
    guard(|| {
        let u = square(u, n)?;
        let sol = affinity::solve_relaxation(&u, RelaxMode::FixedK(k), &RelaxConfig::default())?;
        put(out, GxPartition(affinity::round_partition(&sol.x, k, &u, seed)?))
    })
}

/// Partition from one group label per task.
///
/// # Safety
/// `labels` holds `n` entries.
#[no_mangle]
pub unsafe extern "C" fn gx_partition_from_labels(
    labels: *const usize,
    n: usize,
    out: *mut *mut GxPartition,
) -> GxStatus {
    guard(|| {
        let labels = slice(labels, n, "labels")?;
        put(out, GxPartition(Partition::from_labels(labels)?))
    })
}

/// Task count and group count.
///
/// # Safety
/// `p` is a live handle; `n` and `k` are writable or null.
#[no_mangle]
pub unsafe extern "C" fn gx_partition_shape(p: *const GxPartition, n: *mut usize, k: *mut usize) -> GxStatus {
    guard(|| {
        let p = object(p, "partition")?;
        if let Some(n) = n.as_mut() {
            *n = p.0.n();
        }
        if let Some(k) = k.as_mut() {
            *k = p.0.k();
        }
        Ok(())
    })
}

/// Group label of every task; groups are numbered by their smallest member.
///
/// # Safety
/// `p` is a live handle; `out` holds `len` writable entries.
#[no_mangle]
pub unsafe extern "C" fn gx_partition_labels(p: *const GxPartition, out: *mut usize, len: usize) -> GxStatus {
    guard(|| {
        let p = object(p, "partition")?;
        if len != p.0.n() {
            return Err(Fail::Arg(format!("buffer holds {len} labels, partition covers {}", p.0.n())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(&p.0.labels());
        Ok(())
    })
}

/// # Safety
/// `p` comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gx_partition_free(p: *mut GxPartition) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Normalized mutual information of two partitions of the same tasks.
///
/// # Safety
/// `a` and `b` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gx_nmi(a: *const GxPartition, b: *const GxPartition, out: *mut f64) -> GxStatus {
    guard(|| {
        let a = object(a, "a")?;
        let b = object(b, "b")?;
        let v = affinity::nmi(&a.0, &b.0)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// Loads a gradient store written by the extraction stage.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn gx_store_load(path: *const c_char, out: *mut *mut GxStore) -> GxStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
        put(out, GxStore(GradientStore::load(Path::new(path))?))
    })
}

/// Task count, projected dimension and record count of a store.
///
/// # Safety
/// `s` is a live handle; outputs are writable or null.
#[no_mangle]
pub unsafe extern "C" fn gx_store_shape(
    s: *const GxStore,
    n_tasks: *mut usize,
    d: *mut usize,
    records: *mut usize,
) -> GxStatus {
    guard(|| {
        let s = object(s, "store")?;
        if let Some(v) = n_tasks.as_mut() {
            *v = s.0.header.n_tasks;
        }
        if let Some(v) = d.as_mut() {
            *v = s.0.header.d;
        }
        if let Some(v) = records.as_mut() {
            *v = s.0.records.len();
        }
        Ok(())
    })
}

/// # Safety
/// `s` comes from [`gx_store_load`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gx_store_free(s: *mut GxStore) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Fits the surrogate on the records of one subset and writes its score
/// (negated surrogate loss). `ridge < 0` selects the default.
///
/// # Safety
/// `s` is a live handle; `subset` holds `len` task ids; `score` is writable.
#[no_mangle]
pub unsafe extern "C" fn gx_estimate(
    s: *const GxStore,
    subset: *const usize,
    len: usize,
    ridge: f64,
    score: *mut f64,
) -> GxStatus {
    guard(|| {
        let s = object(s, "store")?;
        let subset = slice(subset, len, "subset")?;
        let mut cfg = SolverConfig::default();
        if ridge >= 0.0 {
            cfg.ridge = ridge;
        }
        let (fit, _) = fit_surrogate(&s.0, subset, &cfg)?;
        *score.as_mut().ok_or(Fail::Null("score"))? = fit.score;
        Ok(())
    })
}
