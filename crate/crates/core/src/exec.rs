//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always split into the same fixed-size chunks and partial results
//! are reduced in chunk order, so `Sequential` and `Parallel` produce
//! bit-identical output. Without the `parallel` feature, `Parallel` runs
//! sequentially.

use serde::{Deserialize, Serialize};

/// Rows per chunk for row-wise reductions.
pub const ROW_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_indices<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Maps `f` over items, preserving order.
pub fn map_slice<I, T, F>(exec: Execution, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_indices(exec, items.len(), |i| f(&items[i]))
}

/// Splits `0..n` into [`ROW_CHUNK`]-sized ranges, maps each range and folds
/// the partials left to right with `combine`.
pub fn reduce_row_chunks<T, F, C>(exec: Execution, n: usize, map: F, mut combine: C) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    C: FnMut(T, T) -> T,
{
    let chunks = n.div_ceil(ROW_CHUNK);
    let parts = map_indices(exec, chunks, |c| {
        let start = c * ROW_CHUNK;
        map(start..(start + ROW_CHUNK).min(n))
    });
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, &mut combine))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_across_modes() {
        let data: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |exec| reduce_row_chunks(exec, data.len(), |r| data[r].iter().sum::<f64>(), |a, b| a + b).unwrap();
        assert_eq!(run(Execution::Sequential).to_bits(), run(Execution::Parallel).to_bits());
        assert!(reduce_row_chunks(Execution::Parallel, 0, |_| 1.0, |a, b| a + b).is_none());
    }

    #[test]
    fn map_preserves_order() {
        let out = map_indices(Execution::Parallel, 100, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
