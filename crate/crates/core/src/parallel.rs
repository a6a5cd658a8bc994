//! Replica-level parallelism with schedule-independent results.
//!
//! Work is cut into fixed blocks whose boundaries depend only on the problem
//! size; each block is reduced in index order, and blocks are combined in
//! block order. The worker count therefore never changes a result bit.

use std::ops::Range;
use std::sync::Once;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "SLOWFAST_THREADS";

static GLOBAL_POOL: Once = Once::new();

/// Worker cap from `SLOWFAST_THREADS`, else the machine's parallelism.
pub fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn ensure_global_pool() {
    GLOBAL_POOL.call_once(|| {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(configured_threads())
            .build_global();
    });
}

/// Runs `f` inside a dedicated pool with `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}

/// `f(i)` for `i in 0..n`, returned in index order.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    ensure_global_pool();
    (0..n).into_par_iter().map(f).collect()
}

/// Applies `f` to consecutive blocks of `0..n` of length `block`.
pub fn par_blocks<T, F>(n: usize, block: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let block = block.max(1);
    let nb = n.div_ceil(block);
    par_map(nb, |b| f(b * block..((b + 1) * block).min(n)))
}

/// Pairwise (cascade) summation in fixed order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}
