//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the mapping helpers dispatch to
//! rayon; without it they run serially. Results are always collected in
//! input order, so numeric output is identical in both builds and for any
//! worker count. Callers that need randomness inside a parallel region
//! derive one rng per item from a seed and the item index, never a shared
//! sequential stream.

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
///
/// Output order matches input order regardless of scheduling.
#[cfg(feature = "parallel")]
pub fn map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Like [`map`] over the index range `0..n`.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map((0..n).collect(), f)
}

/// Always-sequential variant, kept compiled in every build so benchmarks
/// can compare the two dispatch paths directly.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Runs `job` inside a rayon pool of `jobs` threads (0 = rayon default).
/// Without the `parallel` feature the job just runs on the caller thread.
#[cfg(feature = "parallel")]
pub fn with_jobs<R: Send>(jobs: usize, job: impl FnOnce() -> R + Send) -> R {
    if jobs == 0 {
        return job();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("rayon pool");
    pool.install(job)
}

#[cfg(not(feature = "parallel"))]
pub fn with_jobs<R: Send>(_jobs: usize, job: impl FnOnce() -> R + Send) -> R {
    job()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let out = map((0..100).collect::<Vec<usize>>(), |i| 2 * i);
        assert_eq!(out, (0..100).map(|i| 2 * i).collect::<Vec<_>>());
    }

    #[test]
    fn par_and_seq_agree() {
        let items: Vec<f64> = (0..64).map(|i| i as f64 * 0.37).collect();
        let a = map(items.clone(), |x| x.sin() * x.cos());
        let b = seq_map(items, |x| x.sin() * x.cos());
        assert_eq!(a, b);
    }
}
