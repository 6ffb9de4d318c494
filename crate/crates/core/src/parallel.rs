//! Worker-pool control.
//!
//! All parallel kernels in this crate are written in gather form: every
//! output element is a pure function of the inputs with a fixed reduction
//! order, so results are bit-identical for any worker count. `STAA_THREADS`
//! caps the pool size; `0` disables the pool entirely.

use std::sync::OnceLock;

use rayon::ThreadPool;

static POOL: OnceLock<Option<ThreadPool>> = OnceLock::new();

fn pool() -> &'static Option<ThreadPool> {
    POOL.get_or_init(|| {
        let requested = std::env::var("STAA_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok());
        match requested {
            Some(0) | Some(1) => None,
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("thread pool"),
            ),
            None => Some(rayon::ThreadPoolBuilder::new().build().expect("thread pool")),
        }
    })
}

/// Number of workers the crate will use (1 means sequential).
pub fn worker_count() -> usize {
    match pool() {
        Some(p) => p.current_num_threads(),
        None => 1,
    }
}

/// Runs `f` on every chunk of `out` (split every `chunk_len` elements),
/// in parallel when a pool is available. `f` receives the chunk index and
/// the chunk itself; chunks are disjoint so the result does not depend on
/// scheduling.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0);
    match pool() {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }),
        None => {
            for (i, c) in out.chunks_mut(chunk_len).enumerate() {
                f(i, c);
            }
        }
    }
}

/// Maps `0..n` to values in parallel, preserving order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    match pool() {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(|i| f(i)).collect()
        }),
        None => (0..n).map(f).collect(),
    }
}
