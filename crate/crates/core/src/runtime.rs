//! Process-wide worker budget for the per-video evaluation loops.
//!
//! Videos are scored independently against read-only parameters, so the
//! loops split them into contiguous chunks, one worker per chunk. Results
//! land at their input index, which makes every output byte-identical
//! regardless of the budget; threads change wall time only.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Cap the number of worker threads; zero is treated as one.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed).max(1)
}

/// Order-preserving map over `items` using at most [`threads`] workers.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = threads().min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let mut results: Vec<Option<R>> = Vec::with_capacity(items.len());
    results.resize_with(items.len(), || None);
    let f = &f;
    std::thread::scope(|scope| {
        for (ci, (inputs, outputs)) in
            items.chunks(chunk).zip(results.chunks_mut(chunk)).enumerate()
        {
            scope.spawn(move || {
                let base = ci * chunk;
                for (off, (input, output)) in inputs.iter().zip(outputs.iter_mut()).enumerate() {
                    *output = Some(f(base + off, input));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("worker filled every slot")).collect()
}
