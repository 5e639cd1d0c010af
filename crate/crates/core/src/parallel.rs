//! Order-preserving fan-out over scoped threads, and allocator tuning.

use std::num::NonZeroUsize;
use std::thread;

/// Worker count: `SEQNET_THREADS` when set to a positive integer, otherwise
/// the machine's available parallelism.
pub fn thread_count() -> usize {
    std::env::var("SEQNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// Applies `f` to every item, returning results in input order. Each item is
/// processed independently, so results do not depend on the thread count.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = thread_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Keeps large buffers on the heap instead of fresh `mmap` regions.
///
/// Training allocates and frees many multi-megabyte activations per step;
/// with glibc's default threshold each one is a fresh mapping whose pages
/// fault in again on first touch. Idempotent and a no-op elsewhere.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            // glibc caps the threshold at 32 MiB on 64-bit targets
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        });
    }
}
