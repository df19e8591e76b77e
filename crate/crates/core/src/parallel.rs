//! Order-preserving map over independent jobs on scoped threads.

/// Worker count from `requested`, falling back to the available parallelism when 0.
pub fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

/// Applies `f` to every item using up to `threads` workers; output order matches input.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    let threads = worker_count(threads).min(items.len());
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (slots, inputs) in out.chunks_mut(chunk).zip(items.chunks(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (slot, x) in slots.iter_mut().zip(inputs) {
                    *slot = Some(f(x));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker finished")).collect()
}
