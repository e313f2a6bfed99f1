//! Thread-count control for the numeric kernels.
//!
//! The kernels are written so that every output element is computed by
//! exactly one task and reductions run in a fixed order, which makes results
//! bit-identical for any thread count. The default is single-threaded;
//! callers opt in to parallelism with [`set_threads`].

use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use rayon::ThreadPool;

static POOL: RwLock<Option<Arc<ThreadPool>>> = RwLock::new(None);

/// Sets the worker thread count for subsequent kernel calls. `n <= 1`
/// disables parallelism entirely.
pub fn set_threads(n: usize) {
    let pool = if n <= 1 {
        None
    } else {
        Some(Arc::new(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("failed to build worker thread pool"),
        ))
    };
    *POOL.write().unwrap() = pool;
}

/// Current worker thread count (1 when parallelism is disabled).
pub fn threads() -> usize {
    POOL.read()
        .unwrap()
        .as_ref()
        .map(|p| p.current_num_threads())
        .unwrap_or(1)
}

fn pool() -> Option<Arc<ThreadPool>> {
    POOL.read().unwrap().clone()
}

/// Splits `data` into `chunk`-sized pieces and runs `f(index, piece)` on
/// each, in parallel when a pool is configured. Each piece is visited
/// exactly once, so the result is independent of scheduling.
pub(crate) fn for_each_chunk<F>(data: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    match pool() {
        Some(p) => p.install(|| {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }),
        None => {
            for (i, c) in data.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        }
    }
}

/// Computes `f(0)..f(n-1)` and returns the results in index order.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match pool() {
        Some(p) => p.install(|| (0..n).into_par_iter().map(f).collect()),
        None => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_visits_every_piece_once() {
        let mut data = vec![0.0f32; 12];
        for_each_chunk(&mut data, 3, |i, c| {
            for v in c.iter_mut() {
                *v = i as f32;
            }
        });
        assert_eq!(data[0..3], [0.0; 3]);
        assert_eq!(data[9..12], [3.0; 3]);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(5, |i| i * i);
        assert_eq!(out, vec![0, 1, 4, 9, 16]);
    }
}
