//! Data-parallel helpers with a sequential fallback.
//!
//! Work is split into fixed-size chunks and per-chunk results are combined in
//! chunk order, so every helper returns bit-identical results whether the
//! chunks run on one thread or on a rayon pool. With the `parallel` feature
//! disabled, [`Execution::Parallel`] silently runs sequentially.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used by reductions that must stay thread-count independent.
pub const REDUCE_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

impl Execution {
    #[inline]
    fn parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Applies `f(chunk_index, out_chunk, in_chunk)` over matching chunks of `out`
/// and `inp` and collects the return values in chunk order.
pub fn zip_chunks_map<T, U, R, F>(exec: Execution, out: &mut [U], inp: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    U: Send,
    R: Send,
    F: Fn(usize, &mut [U], &[T]) -> R + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    assert_eq!(out.len(), inp.len(), "zip_chunks_map length mismatch");
    if exec.parallel() {
        #[cfg(feature = "parallel")]
        {
            return out
                .par_chunks_mut(chunk)
                .zip(inp.par_chunks(chunk))
                .enumerate()
                .map(|(i, (o, x))| f(i, o, x))
                .collect();
        }
    }
    out.chunks_mut(chunk)
        .zip(inp.chunks(chunk))
        .enumerate()
        .map(|(i, (o, x))| f(i, o, x))
        .collect()
}

/// Maps `f(chunk_index, chunk)` over `data` and collects in chunk order.
pub fn map_chunks<T, R, F>(exec: Execution, data: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    if exec.parallel() {
        #[cfg(feature = "parallel")]
        {
            return data.par_chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect();
        }
    }
    data.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// Runs `f(chunk_index, chunk)` over mutable chunks of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    if exec.parallel() {
        #[cfg(feature = "parallel")]
        {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Runs `f` over matching chunks of three mutable buffers and one input.
pub fn zip3_mut<F>(exec: Execution, a: &mut [f32], b: &mut [f32], c: &mut [f32], d: &[f32], chunk: usize, f: F)
where
    F: Fn(&mut [f32], &mut [f32], &mut [f32], &[f32]) + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    assert!(
        a.len() == b.len() && b.len() == c.len() && c.len() == d.len(),
        "zip3_mut length mismatch"
    );
    if exec.parallel() {
        #[cfg(feature = "parallel")]
        {
            a.par_chunks_mut(chunk)
                .zip(b.par_chunks_mut(chunk))
                .zip(c.par_chunks_mut(chunk))
                .zip(d.par_chunks(chunk))
                .for_each(|(((a, b), c), d)| f(a, b, c, d));
            return;
        }
    }
    a.chunks_mut(chunk)
        .zip(b.chunks_mut(chunk))
        .zip(c.chunks_mut(chunk))
        .zip(d.chunks(chunk))
        .for_each(|(((a, b), c), d)| f(a, b, c, d));
}

/// Evaluates `f(i)` for `i in 0..n`, results in index order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if exec.parallel() {
        #[cfg(feature = "parallel")]
        {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Sums `f(range)` over consecutive ranges of [`REDUCE_CHUNK`] indices in `0..n`.
///
/// Partial sums are added left to right, independent of the thread count.
pub fn chunked_sum<F>(exec: Execution, n: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    map_range(exec, chunks, |c| {
        let start = c * REDUCE_CHUNK;
        f(start..(start + REDUCE_CHUNK).min(n))
    })
    .into_iter()
    .fold(0.0, |acc, x| acc + x)
}

/// Sum of squares of `data` in f64, thread-count independent.
pub fn sum_squares(exec: Execution, data: &[f32]) -> f64 {
    chunked_sum(exec, data.len(), |r| {
        data[r].iter().map(|&x| (x as f64) * (x as f64)).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_match_across_modes() {
        let data: Vec<f32> = (0..10_007).map(|i| ((i * 7919) % 1000) as f32 * 1e-3 - 0.5).collect();
        let a = sum_squares(Execution::Sequential, &data);
        let b = sum_squares(Execution::Parallel, &data);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn zip_map_preserves_chunk_order() {
        let inp: Vec<u32> = (0..100).collect();
        let mut out = vec![0u32; 100];
        let firsts = zip_chunks_map(Execution::Parallel, &mut out, &inp, 7, |i, o, x| {
            for (a, b) in o.iter_mut().zip(x) {
                *a = b * 2;
            }
            (i, x[0])
        });
        assert_eq!(firsts.len(), 15);
        assert!(firsts.iter().all(|&(i, f)| f as usize == i * 7));
        assert_eq!(out[99], 198);
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(chunked_sum(Execution::Parallel, 0, |_| 1.0), 0.0);
        assert!(map_chunks::<f32, f32, _>(Execution::Parallel, &[], 4, |_, _| 0.0).is_empty());
    }
}
