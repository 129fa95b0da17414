//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper splits work into the same fixed chunks whether or not rayon
//! is in use, and merges partial results in chunk order. Results are
//! therefore bitwise identical across thread counts and across builds with
//! and without the `parallel` feature.
//!
//! Parallel execution kicks in only when the `parallel` feature is enabled
//! and the current rayon pool has more than one thread, so running inside a
//! one-thread pool (the CLI default) takes the plain sequential loops.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Pixels per work chunk. Part of the reproducibility contract: changing it
/// changes the summation order of every chunked reduction.
pub const CHUNK_LEN: usize = 1 << 14;

/// Whether the helpers will actually fan out on this thread.
#[cfg(feature = "parallel")]
pub fn parallel_enabled() -> bool {
    rayon::current_num_threads() > 1
}

#[cfg(not(feature = "parallel"))]
pub fn parallel_enabled() -> bool {
    false
}

fn chunk_ranges(len: usize) -> impl Iterator<Item = Range<usize>> + Clone {
    (0..len.div_ceil(CHUNK_LEN)).map(move |c| c * CHUNK_LEN..((c + 1) * CHUNK_LEN).min(len))
}

/// Fills `out` chunk by chunk; `f` receives the chunk's starting offset.
pub fn fill_chunks<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        out.par_chunks_mut(CHUNK_LEN)
            .enumerate()
            .for_each(|(c, chunk)| f(c * CHUNK_LEN, chunk));
        return;
    }
    out.chunks_mut(CHUNK_LEN)
        .enumerate()
        .for_each(|(c, chunk)| f(c * CHUNK_LEN, chunk));
}

/// Like [`fill_chunks`] for two equally long outputs filled together.
pub fn fill_chunks2<A, B, F>(a: &mut [A], b: &mut [B], f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        a.par_chunks_mut(CHUNK_LEN)
            .zip(b.par_chunks_mut(CHUNK_LEN))
            .enumerate()
            .for_each(|(c, (ca, cb))| f(c * CHUNK_LEN, ca, cb));
        return;
    }
    a.chunks_mut(CHUNK_LEN)
        .zip(b.chunks_mut(CHUNK_LEN))
        .enumerate()
        .for_each(|(c, (ca, cb))| f(c * CHUNK_LEN, ca, cb));
}

/// Maps each fixed chunk of `0..len` to a partial result, in chunk order.
pub fn map_chunks<R, F>(len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        let ranges: Vec<_> = chunk_ranges(len).collect();
        return ranges.into_par_iter().map(f).collect();
    }
    chunk_ranges(len).map(f).collect()
}

/// Chunked sum with a fixed merge order.
pub fn sum_chunks<F>(len: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Sync + Send,
{
    map_chunks(len, f).into_iter().fold(0.0, |acc, x| acc + x)
}

/// Maps `0..n` to results in index order (images, candidate thresholds).
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Sorts with a total order. The result does not depend on the algorithm
/// because `cmp` must distinguish every pair that matters downstream.
pub fn sort_by<T, F>(v: &mut [T], cmp: F)
where
    T: Send,
    F: Fn(&T, &T) -> std::cmp::Ordering + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        v.par_sort_unstable_by(cmp);
        return;
    }
    v.sort_unstable_by(cmp);
}
