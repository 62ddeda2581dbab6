//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers fan out over rayon's
//! pool when the work is large enough and parallelism is switched on at
//! runtime. Without the feature everything runs on the calling thread.
//! Either way each output element is produced by exactly the same
//! arithmetic, so results are bitwise identical across modes.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Minimum number of multiply-adds before a kernel is split across threads.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Runtime switch. Has no effect when the crate is built without `parallel`.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::SeqCst);
}

pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::SeqCst)
}

/// Number of worker threads the parallel paths would use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if is_enabled() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// Calls `f(row, chunk)` for every `row_len`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && work >= MIN_PARALLEL_WORK {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    let _ = work;
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

/// Ordered map over `0..n`.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Runs `f` with parallel kernels switched off, restoring the previous state.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = ENABLED.swap(false, Ordering::SeqCst);
    let out = f();
    ENABLED.store(prev, Ordering::SeqCst);
    out
}
