//! Deterministic data-parallel helpers.
//!
//! Work is split into fixed-size chunks independent of the worker count;
//! per-chunk results come back in chunk order, so any reduction performed by
//! the caller in that order is bit-identical for 1 or N threads.

use rayon::prelude::*;

/// Rays per work unit for batched forward/backward passes.
pub const RAY_CHUNK: usize = 64;

pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    items
        .par_chunks(chunk.max(1))
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

/// Installs a global pool with `threads` workers (0 = rayon default).
/// Repeated calls after the first are ignored.
pub fn init_thread_pool(threads: usize) {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_order_is_preserved() {
        let items: Vec<u32> = (0..1000).collect();
        let sums = map_chunks(&items, 64, |i, c| (i, c.iter().sum::<u32>()));
        assert_eq!(sums.len(), 16);
        for (k, (i, _)) in sums.iter().enumerate() {
            assert_eq!(*i, k);
        }
        assert_eq!(sums.iter().map(|s| s.1).sum::<u32>(), 499_500);
    }

    #[test]
    fn float_reduction_is_independent_of_pool_size() {
        let items: Vec<f64> = (0..5000).map(|i| (i as f64).sin() * 1e-3 + 1.0 / (i as f64 + 1.0)).collect();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                map_chunks(&items, 37, |_, c| c.iter().sum::<f64>())
                    .into_iter()
                    .fold(0.0, |a, b| a + b)
            })
        };
        assert_eq!(run(1).to_bits(), run(4).to_bits());
    }
}
