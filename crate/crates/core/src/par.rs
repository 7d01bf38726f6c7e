//! Data-parallel loop helpers.
//!
//! With the `parallel` feature these dispatch to rayon, otherwise they run the
//! same closures sequentially. Every helper hands each output element to
//! exactly one closure invocation, so results are bit-identical whichever
//! path runs and however many threads the pool has.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar operations a loop stays on the calling thread.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Runs `f(index, chunk)` over `data.chunks_mut(chunk_len)`.
///
/// `work` is a rough operation count for the whole loop; small loops skip the
/// thread pool.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= MIN_PARALLEL_WORK && data.len() > chunk_len {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
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

/// Number of worker threads available to the parallel helpers.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Pins the global pool to a single worker. Returns false if the pool was
/// already initialised with a different size.
pub fn force_single_thread() -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .is_ok()
            || rayon::current_num_threads() == 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_every_element_once() {
        let mut v = vec![0usize; 1 << 17];
        for_each_chunk(&mut v, 1000, usize::MAX, |i, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x += i * 1000 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| x == i));
    }

    #[test]
    fn map_range_keeps_order() {
        let v = map_range(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }
}
