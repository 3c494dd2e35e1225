//! Execution policy for the data-parallel loops.
//!
//! Every parallel loop in the crate partitions its *writes* so that each
//! output element is produced by exactly one closure invocation with a fixed
//! internal reduction order. Results are therefore bitwise identical between
//! [`Exec::Sequential`] and [`Exec::Parallel`], regardless of thread count.
//! The worker count is whatever rayon pool the caller installs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Sequential,
    Parallel,
}

impl Exec {
    /// `Parallel` when the crate was built with rayon, `Sequential` otherwise.
    pub fn best() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn from_threads(threads: usize) -> Self {
        if threads > 1 {
            Exec::best()
        } else {
            Exec::Sequential
        }
    }

    #[inline]
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Calls `f(i, chunk)` for consecutive `chunk_len`-sized pieces of `data`.
    pub fn chunks_mut<T, F>(self, data: &mut [T], chunk_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Send + Sync,
    {
        assert!(chunk_len > 0);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }

    /// `(0..n).map(f).collect()`, preserving index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Send + Sync,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}
