//! Execution-mode dispatch for the data-parallel inner loops.
//!
//! The hot paths (per-pixel rendering, per-sample gradient accumulation,
//! per-episode evaluation) map an index range to values. With the `parallel`
//! feature enabled (the default) they run on rayon; without it the same code
//! compiles to plain sequential iteration. Results are collected in index
//! order, so both modes produce identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How to execute a data-parallel loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        ExecMode::Parallel
    }

    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        ExecMode::Sequential
    }
}

/// Maps `0..n` through `f`, collecting results in index order.
pub fn map_range<T, F>(n: usize, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let seq = map_range(100, ExecMode::Sequential, |i| i * i);
        let def = map_range(100, ExecMode::default(), |i| i * i);
        assert_eq!(seq, def);
        assert_eq!(seq[7], 49);
    }
}
