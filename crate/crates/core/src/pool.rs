//! Bounded fan-out over scoped threads. Results come back in input order,
//! so callers never observe scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub fn par_map<T, R, F>(width: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let width = width.max(1).min(items.len().max(1));
    if width == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..width {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= items.len() {
                    break;
                }
                let out = f(&items[idx]);
                *slots[idx].lock().expect("result slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("every index is processed exactly once")
        })
        .collect()
}

/// Counting semaphore bounding concurrent holders.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cond: std::sync::Condvar,
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cond: std::sync::Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut guard = self.permits.lock().expect("semaphore poisoned");
        while *guard == 0 {
            guard = self.cond.wait(guard).expect("semaphore poisoned");
        }
        *guard -= 1;
        Permit { sem: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut guard = self.sem.permits.lock().expect("semaphore poisoned");
        *guard += 1;
        self.sem.cond.notify_one();
    }
}
