//! Order-preserving map over independent jobs.
//!
//! With the default `parallel` feature the work is spread over rayon's pool;
//! without it the same code runs sequentially. Results come back in input order
//! either way, and every job derives its own RNG stream from its index, so
//! artifacts are byte-identical at any thread count — that property is load-bearing
//! (the determinism acceptance check compares single-threaded and multi-threaded
//! runs), so never fold results in completion order.
//!
//! [`force_sequential`] switches a parallel build to the sequential path at
//! runtime, so one process can produce both artifact sets and compare them.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Route every subsequent `par_map`/`par_map_range` call through the
/// sequential path, even in a build with the `parallel` feature. Global and
/// process-wide; flip back with `force_sequential(false)`.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True when maps will run sequentially: either the build has no `parallel`
/// feature or [`force_sequential`] is in effect.
pub fn is_sequential() -> bool {
    cfg!(not(feature = "parallel")) || FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    if is_sequential() {
        return items.iter().map(f).collect();
    }
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    if is_sequential() {
        return (0..n).map(f).collect();
    }
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Sequential rendition of [`par_map_range`], kept unconditionally so benchmarks
/// can compare the two paths within one build.
pub fn seq_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
