use rayon::ThreadPoolBuilder;

/// Runs `f` inside a dedicated rayon pool of `workers` threads.
///
/// `0` means "use the global pool". Work partitioning never affects results:
/// every parallel map in this crate collects in input order.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    match ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not start a {workers}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

pub fn default_parallelism() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
