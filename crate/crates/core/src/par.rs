//! Execution policy for data-parallel loops.
//!
//! Reductions split work into fixed chunks and sum chunk results in chunk
//! order, so floating-point results do not depend on the policy or on thread
//! scheduling. Without the `parallel` feature both policies run sequentially.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Chunk length used by [`Execution::chunked_sum`] when callers have no
/// preference.
pub const DEFAULT_CHUNK: usize = 64;

impl Execution {
    /// `(0..n).map(f)` collected in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Sums the vectors produced by `f` over fixed chunks of `0..n`.
    /// `f` returns the partial sum of one chunk as a vector of length `len`.
    pub fn chunked_sum<F>(self, n: usize, chunk: usize, len: usize, f: F) -> Vec<f64>
    where
        F: Fn(Range<usize>) -> Vec<f64> + Sync + Send,
    {
        let chunk = chunk.max(1);
        let chunks = n.div_ceil(chunk);
        let partials = self.map(chunks, |c| f(c * chunk..((c + 1) * chunk).min(n)));
        let mut total = vec![0.0; len];
        for part in partials {
            debug_assert_eq!(part.len(), len);
            for (t, p) in total.iter_mut().zip(&part) {
                *t += p;
            }
        }
        total
    }

    /// Fallible variant of [`Execution::map`]; returns the first error by index.
    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}
