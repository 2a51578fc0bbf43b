//! Thread-count control. `GAMMALDM_THREADS` caps the rayon pool used by the
//! tensor kernels; the value actually in effect is recorded by the benchmark
//! harness. Kernels only parallelize over disjoint output slices with a fixed
//! per-element summation order, so results are bit-identical for any thread
//! count.

use std::sync::OnceLock;

static POOL_THREADS: OnceLock<usize> = OnceLock::new();

/// Initialize the global rayon pool, honoring `GAMMALDM_THREADS` if set.
/// Safe to call more than once; only the first call takes effect.
pub fn init_threads() -> usize {
    *POOL_THREADS.get_or_init(|| {
        let requested = std::env::var("GAMMALDM_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1);
        if let Some(n) = requested {
            // Ignore the error: a pool may already exist (e.g. in tests).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    })
}

/// Number of worker threads in effect.
pub fn thread_count() -> usize {
    init_threads()
}
