//! Index-parallel map abstraction.
//!
//! Every parallel section in the core is expressed as "compute item `i` for
//! `i in 0..n`, collect in index order", followed by a serial fixed-shape
//! reduction. Results therefore never depend on the worker count.

use alloc::vec::Vec;

pub trait Executor: Sync {
    /// Evaluates `f(0), .., f(n - 1)` and returns the results in index order.
    fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl Executor for Serial {
    fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
