// SPDX-License-Identifier: MIT OR Apache-2.0

//! Order-preserving data-parallel map over samples.
//!
//! With the `parallel` feature disabled every call runs sequentially; with it
//! enabled callers can still force sequential execution through [`ExecMode`].

/// How per-sample work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// Whether this build can actually run in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Maps `f` over `items`, returning results in input order regardless of
/// scheduling.
pub fn map_ordered<T, U, F>(items: &[T], mode: ExecMode, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Like [`map_ordered`] but stops at the first error in input order, so the
/// reported error does not depend on thread scheduling.
pub fn try_map_ordered<T, U, E, F>(items: &[T], mode: ExecMode, f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    map_ordered(items, mode, f).into_iter().collect()
}

/// Caps the global worker pool. `0` keeps the automatic choice.
///
/// Only the first call in a process has any effect.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
