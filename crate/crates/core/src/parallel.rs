use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Applies `f` to every item on at most `bound` worker threads and returns the
/// results in input order, whatever order they finished in.
pub fn ordered_map<T, R, F>(items: &[T], bound: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = bound.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

/// Like [`ordered_map`] but stops handing out new items after the first error.
/// Returns the results of every item that completed, in order, up to the
/// first failure, together with that failure.
pub fn ordered_try_map<T, R, E, F>(items: &[T], bound: usize, f: F) -> (Vec<R>, Option<E>)
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let failed = std::sync::atomic::AtomicBool::new(false);
    let results = ordered_map(items, bound, |i, t| {
        if failed.load(Ordering::Relaxed) {
            return None;
        }
        let r = f(i, t);
        if r.is_err() {
            failed.store(true, Ordering::Relaxed);
        }
        Some(r)
    });
    // Items skipped after a failure end the contiguous prefix but the failure
    // itself may sit later in input order.
    let mut ok = Vec::new();
    let mut contiguous = true;
    for r in results {
        match r {
            Some(Ok(v)) if contiguous => ok.push(v),
            Some(Ok(_)) => {}
            Some(Err(e)) => return (ok, Some(e)),
            None => contiguous = false,
        }
    }
    (ok, None)
}
