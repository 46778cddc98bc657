//! Worker-thread configuration.
//!
//! `BATCHRL_THREADS` caps the worker threads used by the embarrassingly
//! parallel stages (per-feature normalization fits, episode generation,
//! read-only model scans). `0` or unset means deterministic single-threaded
//! execution. Parameter updates are always single-writer regardless of this
//! setting.

/// Number of worker threads requested via `BATCHRL_THREADS` (0 = sequential).
pub fn configured_threads() -> usize {
    std::env::var("BATCHRL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0)
}

/// Map `f` over `items`, in parallel when more than one worker thread is
/// configured. Output order always matches input order, so results are
/// identical either way.
pub fn ordered_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    let n = configured_threads();
    if n <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool");
    pool.install(|| {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    })
}
