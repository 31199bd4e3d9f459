//! Data-parallel map with a serial fallback.
//!
//! Every parallel loop in the crate goes through [`map_indexed`], which always
//! returns results in index order. Reductions are done afterwards over the
//! ordered vector, so serial and parallel execution produce identical bits.

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    /// Uses the ambient rayon pool. Without the `parallel` feature this is the
    /// same as [`Execution::Serial`].
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluates `f(0), f(1), .., f(n-1)` and returns them in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}
