//! Deterministic parallelism helpers.
//!
//! Work is only ever split across disjoint output regions, and every region
//! is filled by a sequential inner loop with a fixed accumulation order. The
//! result is therefore bitwise identical across thread counts and equal to
//! the sequential fallback (`--no-default-features`).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(block_index, block)` over consecutive `block_len`-sized chunks of
/// `out`. The final chunk may be shorter.
pub fn for_each_block<T, F>(out: &mut [T], block_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(block_len > 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(block_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, chunk) in out.chunks_mut(block_len).enumerate() {
            f(i, chunk);
        }
    }
}

/// Maps `0..n` through `f`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_cover_output_exactly_once() {
        let mut out = vec![0u32; 10];
        for_each_block(&mut out, 3, |i, chunk| {
            for v in chunk.iter_mut() {
                *v += 1 + i as u32;
            }
        });
        assert_eq!(out, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 4]);
    }

    #[test]
    fn map_indexed_preserves_order() {
        assert_eq!(map_indexed(4, |i| i * i), vec![0, 1, 4, 9]);
    }
}
