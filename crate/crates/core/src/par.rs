//! Parallel execution helpers.
//!
//! With the `parallel` feature (default) batch-level loops run on rayon.
//! Without it everything is sequential. `force_sequential` lets benchmarks
//! compare both code paths inside a single binary.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Globally disable (or re-enable) rayon dispatch at runtime.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Run `f` for every index in `0..n`, in parallel when available.
///
/// `f` must be safe to call concurrently for distinct indices; every call
/// writes to disjoint data, so results do not depend on scheduling.
#[cfg(feature = "parallel")]
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Send + Sync,
{
    use rayon::prelude::*;
    if sequential_forced() || n <= 1 {
        for i in 0..n {
            f(i);
        }
    } else {
        (0..n).into_par_iter().for_each(f);
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Send + Sync,
{
    for i in 0..n {
        f(i);
    }
}

/// Map over `0..n` collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    use rayon::prelude::*;
    if sequential_forced() || n <= 1 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    (0..n).map(f).collect()
}
