//! Order-preserving parallel map over scoped threads.

use std::num::NonZeroUsize;

/// Number of worker threads. One worker runs inline on the caller's thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Workers(NonZeroUsize);

impl Workers {
    pub const ONE: Workers = Workers(NonZeroUsize::MIN);

    pub fn new(n: usize) -> Option<Self> {
        NonZeroUsize::new(n).map(Workers)
    }

    pub fn get(self) -> usize {
        self.0.get()
    }
}

impl Default for Workers {
    fn default() -> Self {
        Self::ONE
    }
}

/// Applies `f` to every item and returns the results in input order.
///
/// Items are split into contiguous chunks, one per worker, so the output is
/// independent of the worker count whenever `f` is a pure function.
pub fn par_map<T, R, F>(items: &[T], workers: Workers, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let n = workers.get().min(items.len());
    if n <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(n);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    })
}

/// [`par_map`] for fallible functions; returns the first error in input order.
pub fn try_par_map<T, R, E, F>(items: &[T], workers: Workers, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    par_map(items, workers, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        let items: Vec<u64> = (0..37).collect();
        let serial = par_map(&items, Workers::ONE, |x| x * x);
        for w in 2..6 {
            assert_eq!(par_map(&items, Workers::new(w).unwrap(), |x| x * x), serial);
        }
    }

    #[test]
    fn first_error_wins() {
        let items: Vec<i32> = (0..10).collect();
        let r: Result<Vec<i32>, i32> = try_par_map(&items, Workers::new(3).unwrap(), |&x| {
            if x % 4 == 3 {
                Err(x)
            } else {
                Ok(x)
            }
        });
        assert_eq!(r, Err(3));
    }
}
