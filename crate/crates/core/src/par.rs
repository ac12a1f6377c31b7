//! Sequential / rayon execution shim.
//!
//! Every helper returns results in input order, so reductions performed by
//! the caller over the returned vector are independent of the mode.

use serde::{Deserialize, Serialize};

/// How data-parallel loops are executed.
///
/// `Parallel` silently degrades to `Sequential` when the crate is built
/// without the `parallel` feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Applies `f` to each index in `0..n`.
pub fn map_range<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Applies `f` to each element of `items`.
pub fn map_slice<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Applies `f` to consecutive chunks of `items` of length `chunk` (the last
/// one may be shorter).
pub fn map_chunks<T, R, F>(mode: Parallelism, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = mode;
    items.chunks(chunk).map(f).collect()
}
