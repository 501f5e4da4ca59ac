//! Bounded producer-consumer prefetching.

use std::sync::mpsc::sync_channel;
use std::thread;

use crate::error::Result;

/// Builds items `0..count` on `workers` threads and hands them to `consume`
/// in index order. Worker `w` builds items `w, w + workers, ...` into its own
/// queue of `depth` slots, so delivery order never depends on scheduling.
/// Returning an error from `consume` stops the workers.
pub fn prefetch<T, M, C>(count: usize, workers: usize, depth: usize, make: M, mut consume: C) -> Result<()>
where
    T: Send,
    M: Fn(usize) -> T + Sync,
    C: FnMut(usize, T) -> Result<()>,
{
    let workers = workers.max(1).min(count.max(1));
    if workers == 1 && depth == 0 {
        for i in 0..count {
            consume(i, make(i))?;
        }
        return Ok(());
    }
    thread::scope(|scope| {
        let mut queues = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = sync_channel(depth.max(1));
            let make = &make;
            scope.spawn(move || {
                for i in (w..count).step_by(workers) {
                    if tx.send(make(i)).is_err() {
                        break;
                    }
                }
            });
            queues.push(rx);
        }
        for i in 0..count {
            let item = queues[i % workers].recv().expect("loader worker exited early");
            consume(i, item)?;
        }
        Ok(())
    })
}
