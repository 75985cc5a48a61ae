//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the [`Parallelism::Parallel`] policy
//! fans work out over the rayon global pool. Without the feature every policy
//! runs on the calling thread, so results never depend on the build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution policy for the data-parallel kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Parallel,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }
}

/// Below this many items the parallel path is not worth the fork.
const MIN_PARALLEL_LEN: usize = 4096;

/// `items.iter().map(f).collect()` under the given policy. Output order always
/// matches input order.
pub fn map<T, U, F>(policy: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match policy {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel if items.len() >= MIN_PARALLEL_LEN => {
            items.par_iter().with_min_len(1024).map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Like [`map`] but for coarse-grained jobs (whole sessions, clusterings):
/// no minimum length, one task per item.
pub fn map_jobs<T, U, F>(policy: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match policy {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Applies `f` to each `(item, slot)` pair, in parallel when allowed.
pub fn zip_for_each<T, U, F>(policy: Parallelism, items: &[T], out: &mut [U], f: F)
where
    T: Sync,
    U: Send,
    F: Fn(&T, &mut U) + Sync + Send,
{
    assert_eq!(items.len(), out.len());
    match policy {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel if items.len() >= MIN_PARALLEL_LEN => items
            .par_iter()
            .zip(out.par_iter_mut())
            .with_min_len(1024)
            .for_each(|(t, u)| f(t, u)),
        _ => items.iter().zip(out.iter_mut()).for_each(|(t, u)| f(t, u)),
    }
}
