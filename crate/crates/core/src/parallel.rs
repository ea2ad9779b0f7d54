//! Worker pools. Library code parallelises with rayon iterators whose
//! results are collected in index order, so outputs do not depend on the
//! number of workers; this module only decides how many threads run them.

use rayon::ThreadPoolBuilder;

/// Runs `f` inside a dedicated pool of `workers` threads (at least one).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    match ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        // Thread creation can fail in restricted sandboxes; the current pool
        // gives identical results.
        Err(_) => f(),
    }
}
