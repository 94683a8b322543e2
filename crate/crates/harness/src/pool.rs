//! Trial fan-out across a bounded worker pool.

use rayon::prelude::*;

use crate::error::{LabError, LabResult};

pub const THREADS_ENV: &str = "SQUISHER_LAB_THREADS";

/// Workers to use: the machine's parallelism, capped by `SQUISHER_LAB_THREADS`.
pub fn worker_count() -> LabResult<usize> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(available),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(available).max(1)),
            _ => Err(LabError::config(format!("{THREADS_ENV}: expected a positive integer, got `{v}`"))),
        },
    }
}

/// Runs `f` once per seed; results keep the order of `seeds`.
pub fn fan_out<T, F>(seeds: &[u64], f: F) -> LabResult<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> LabResult<T> + Sync,
{
    let workers = worker_count()?;
    if workers == 1 || seeds.len() < 2 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| LabError::config(format!("thread pool: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}
