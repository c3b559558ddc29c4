//! Execution mode for the numeric kernels.
//!
//! Parallel kernels only split work over independent outputs (images in a
//! batch, rows of a GEMM). Reductions across the batch are always performed
//! as per-image partials added in image order, so both modes produce the
//! same bits; `Sequential` additionally guarantees a single thread.

/// How a kernel may schedule its work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Single-threaded, fixed-order accumulation.
    Sequential,
    /// Data-parallel over batch and output-channel loops (needs the
    /// `parallel` feature; falls back to sequential without it).
    #[default]
    Parallel,
}

impl Exec {
    pub fn from_deterministic(deterministic: bool) -> Self {
        if deterministic {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    #[inline]
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Number of items processed concurrently per reduction round.
    pub(crate) fn width(self) -> usize {
        if self.is_parallel() {
            current_threads()
        } else {
            1
        }
    }
}

#[cfg(feature = "parallel")]
fn current_threads() -> usize {
    rayon::current_num_threads().max(1)
}

#[cfg(not(feature = "parallel"))]
fn current_threads() -> usize {
    1
}

/// Caps the global worker pool. Must run before any parallel kernel; later
/// calls are ignored.
pub fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Runs `f(index, chunk)` over consecutive `chunk_len` pieces of `data`.
pub(crate) fn for_each_chunk<T, F>(exec: Exec, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `range`, collecting results in index order.
pub(crate) fn map_range<R, F>(exec: Exec, range: std::ops::Range<usize>, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return range.into_par_iter().map(f).collect();
    }
    let _ = exec;
    range.map(f).collect()
}
