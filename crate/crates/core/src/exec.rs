//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) row- and item-wise loops are
//! dispatched to rayon once the amount of work crosses a threshold. Without
//! it, or after `set_parallel(false)`, every helper runs sequentially. Each
//! output slot is written by exactly one closure call, so results are
//! bitwise identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Multiply-accumulate count below which splitting work is not worth it.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Enables or disables parallel dispatch at runtime. No effect when the
/// crate is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

#[cfg(feature = "parallel")]
#[inline]
fn go_parallel(total_work: usize) -> bool {
    parallel_enabled() && total_work >= MIN_PARALLEL_WORK && rayon::current_num_threads() > 1
}

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
/// `work_per_row` is a rough cost estimate used for the dispatch decision.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let rows = out.len() / row_len;
        if go_parallel(rows.saturating_mul(work_per_row)) {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_per_row;
    out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}

/// Evaluates `f(i)` for `i in 0..n` and collects the results in order.
pub fn map_indexed<R, F>(n: usize, work_per_item: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if go_parallel(n.saturating_mul(work_per_item)) {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work_per_item;
    (0..n).map(f).collect()
}
