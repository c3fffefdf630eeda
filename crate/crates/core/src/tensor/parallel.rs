use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use rayon::ThreadPool;

static THREADS: AtomicUsize = AtomicUsize::new(0);
static POOL: Mutex<Option<(usize, Arc<ThreadPool>)>> = Mutex::new(None);

/// Sets the kernel thread count. 0 or 1 selects the single-threaded reference path.
///
/// Kernels only split work across independent output rows, so every output
/// element is accumulated in the same order whatever the thread count.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

fn pool(n: usize) -> Option<Arc<ThreadPool>> {
    let mut guard = POOL.lock().ok()?;
    match guard.as_ref() {
        Some((count, pool)) if *count == n => Some(pool.clone()),
        _ => {
            let pool = Arc::new(rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()?);
            *guard = Some((n, pool.clone()));
            Some(pool)
        }
    }
}

/// Runs `f(first_row, chunk)` over `out` split into blocks of whole rows.
pub(crate) fn for_row_blocks<T, F>(out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let rows = if row_len == 0 { 0 } else { out.len() / row_len };
    let n = threads();
    // Below this much work the pool overhead dominates.
    if n <= 1 || rows < 2 * n || out.len() < 16_384 {
        f(0, out);
        return;
    }
    let Some(pool) = pool(n) else {
        f(0, out);
        return;
    };
    let rows_per_block = rows.div_ceil(n);
    pool.install(|| {
        out.par_chunks_mut(rows_per_block * row_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i * rows_per_block, chunk));
    });
}
