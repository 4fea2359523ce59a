//! Thread-pool helpers. Work is split into contiguous chunks and results
//! are returned in input order, so outputs never depend on thread count.

use std::num::NonZeroUsize;

use impervia_core::denoiser::{Denoiser, NoisedSample};
use impervia_core::diffusion::GradientExecutor;

/// Ordered parallel map over `items` with at most `threads` workers.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> U + Sync) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(j, t)| f(c * chunk + j, t)).collect::<Vec<U>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn available_threads() -> usize {
    std::thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1)
}

/// Per-sample gradients across a scoped worker pool.
#[derive(Debug, Clone, Copy)]
pub struct ThreadedExecutor {
    pub threads: usize,
}

impl GradientExecutor for ThreadedExecutor {
    fn per_sample(&self, model: &Denoiser, batch: &[NoisedSample]) -> impervia_core::Result<Vec<(f64, Vec<f64>)>> {
        par_map(batch, self.threads, |_, s| model.loss_and_gradient(s, 1.0)).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_threads() {
        let items: Vec<u32> = (0..37).collect();
        let one = par_map(&items, 1, |i, v| (i, v * 3));
        for t in [2, 4, 64] {
            assert_eq!(par_map(&items, t, |i, v| (i, v * 3)), one);
        }
        assert!(par_map(&[] as &[u8], 4, |_, v| *v).is_empty());
    }
}
