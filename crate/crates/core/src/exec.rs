//! Data-parallel helpers for per-grid-point work.
//!
//! With the `parallel` feature (default) the maps below run on the rayon
//! pool; without it they are plain sequential loops. Results are always
//! collected in index order, so any reduction done by the caller afterwards
//! is bit-reproducible regardless of the thread count.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with the sequential code path forced on the current thread.
///
/// Mostly useful for benchmarking the two paths against each other in one
/// binary.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

/// Whether maps issued from this thread go to the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// `(0..len).map(f).collect()`, in parallel when enabled.
pub fn map_range<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    (0..len).map(f).collect()
}

/// Like [`map_range`] but threads a per-worker scratch value through `f`.
pub fn map_range_with<T, S, I, F>(len: usize, init: I, f: F) -> Vec<T>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map_init(&init, |s, i| f(s, i)).collect();
        }
    }
    let mut scratch = init();
    (0..len).map(|i| f(&mut scratch, i)).collect()
}
