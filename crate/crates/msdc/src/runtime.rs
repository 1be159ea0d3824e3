//! Thread-count control for the compute kernels.
//!
//! The library defaults to single-threaded execution, which is the
//! deterministic mode all oracle tests run under. The CLI bumps this from the
//! `MSDC_THREADS` environment variable; `MSDC_THREADS=1` pins the
//! deterministic mode.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the number of worker threads the tensor kernels may use.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Current worker thread budget (1 = fully sequential execution).
pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Initialize the thread budget from `MSDC_THREADS`, falling back to the
/// machine's available parallelism when the variable is unset or invalid.
pub fn init_from_env() {
    let n = std::env::var("MSDC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    set_threads(n);
}
