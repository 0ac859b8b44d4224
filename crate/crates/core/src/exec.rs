//! Execution strategy for the data-parallel inner loops.
//!
//! Every kernel computes each output element with the same accumulation order
//! regardless of strategy, so sequential and parallel runs are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is compiled in, otherwise falls
    /// back to sequential execution.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Whether work is actually spread over a thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Calls `f(chunk_index, chunk)` for each `chunk`-sized piece of `out`.
    pub fn for_each_chunk<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Order-preserving map.
    pub fn map<I, O, F>(self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Order-preserving map over `0..n`.
    pub fn map_range<O, F>(self, n: usize, f: F) -> Vec<O>
    where
        O: Send,
        F: Fn(usize) -> O + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}
