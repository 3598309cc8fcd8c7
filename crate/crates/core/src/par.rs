//! Thread-count plumbing with a sequential fallback.
//!
//! Work is always split into independent items whose results are collected
//! in index order and reduced sequentially, so outputs are bit-identical for
//! every thread count, including 1. Compiling without the `parallel` feature
//! removes the rayon dependency entirely; `Threads` then always runs the
//! sequential path.

#[cfg(feature = "parallel")]
use std::sync::Arc;

/// Execution context carrying an optional worker pool. Cloning shares the
/// pool.
#[derive(Clone, Default)]
pub struct Threads {
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Threads {
    /// Sequential execution.
    pub fn one() -> Self {
        Threads::default()
    }

    /// A context with `n` workers; `n <= 1` stays sequential, as does a pool
    /// build failure or a build without the `parallel` feature.
    pub fn new(n: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if n > 1 {
                if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                    return Threads {
                        pool: Some(Arc::new(pool)),
                    };
                }
            }
        }
        let _ = n;
        Threads::default()
    }

    pub fn count(&self) -> usize {
        #[cfg(feature = "parallel")]
        {
            if let Some(pool) = &self.pool {
                return pool.current_num_threads();
            }
        }
        1
    }

    /// Maps `f` over `0..n`, preserving index order in the result.
    pub fn map<R: Send>(&self, n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
        #[cfg(feature = "parallel")]
        {
            if let Some(pool) = &self.pool {
                use rayon::prelude::*;
                return pool.install(|| (0..n).into_par_iter().map(f).collect());
            }
        }
        (0..n).map(f).collect()
    }

    /// Maps a fallible `f` over `0..n`; on failure returns the error with the
    /// smallest index, independent of scheduling.
    pub fn try_map<R: Send, E: Send>(
        &self,
        n: usize,
        f: impl Fn(usize) -> Result<R, E> + Sync + Send,
    ) -> Result<Vec<R>, E> {
        self.map(n, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_for_any_thread_count() {
        let seq = Threads::one().map(100, |i| i * i);
        let par = Threads::new(4).map(100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn try_map_propagates_lowest_index_error() {
        let r: Result<Vec<usize>, String> = Threads::new(2)
            .try_map(10, |i| if i >= 3 { Err(format!("bad {i}")) } else { Ok(i) });
        assert_eq!(r.unwrap_err(), "bad 3");
    }

    #[test]
    fn zero_and_one_are_sequential() {
        assert_eq!(Threads::new(0).count(), 1);
        assert_eq!(Threads::new(1).count(), 1);
    }
}
