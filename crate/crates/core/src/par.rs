//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch onto the rayon pool;
//! without it they run as plain sequential loops. Every helper computes each
//! output element with the same sequence of floating-point operations either
//! way, so results are bit-identical across both builds and any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays on the calling thread.
pub const PARALLEL_WORK_THRESHOLD: usize = 1 << 14;

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
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

/// Calls `f(row_index, row)` for every `cols`-wide row of `data`.
///
/// `work` is an estimate of the total flop count; small jobs are not split.
pub fn for_each_row_mut<F>(data: &mut [f64], cols: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if work >= PARALLEL_WORK_THRESHOLD {
            data.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    data.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

/// Runs `f` with all helpers forced onto a single thread.
///
/// Used by the benchmarks to compare the parallel and sequential paths
/// inside one binary.
pub fn run_sequential<R, F>(f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

/// Caps the global worker count. Returns false if the pool was already built.
pub fn init_threads(threads: Option<usize>) -> bool {
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n.max(1));
        }
        builder.build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        true
    }
}

/// Number of worker threads helpers may use.
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
