//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) these dispatch to rayon; without
//! it every helper runs the same closure sequentially. Results never depend on
//! the execution mode: work is split into fixed chunks and any reduction over
//! chunk partials happens in chunk order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for coarse-grained work such as scene tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool; identical to `Sequential` when the crate is built
    /// without the `parallel` feature.
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// A one-thread pool only adds a hand-off per call; run inline instead.
#[cfg(feature = "parallel")]
fn pool_helps() -> bool {
    rayon::current_num_threads() > 1
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if pool_helps() {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_range_with(Exec::Parallel, n, f)
}

pub fn map_range_with<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec.is_parallel() && pool_helps() {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Sum of `f(i)` over `0..n` in fixed-size blocks, each block reduced
/// sequentially and the block partials added in order.
pub fn sum_blocks<F>(n: usize, block: usize, f: F) -> f64
where
    F: Fn(std::ops::Range<usize>) -> f64 + Sync + Send,
{
    let block = block.max(1);
    let blocks = n.div_ceil(block);
    map_range(blocks, |b| f(b * block..((b + 1) * block).min(n)))
        .into_iter()
        .sum()
}

/// Sizes the global worker pool. Must run before any parallel work; without
/// the `parallel` feature it does nothing.
pub fn init_threads(n: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}

/// Number of worker threads that parallel helpers will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
        let s = map_range_with(Exec::Sequential, 5, |i| i);
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn chunked_sum_matches_direct() {
        let xs: Vec<f64> = (0..1001).map(|i| (i as f64).sin()).collect();
        let direct: f64 = xs.chunks(64).map(|c| c.iter().sum::<f64>()).sum();
        let s = sum_blocks(xs.len(), 64, |r| xs[r].iter().sum());
        assert_eq!(s, direct);
    }

    #[test]
    fn chunk_indices_cover_slice() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }
}
