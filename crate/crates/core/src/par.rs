//! Data-parallel helpers.
//!
//! Every fan-out in the crate goes through [`map_indexed`] so that the
//! rayon path and the sequential path produce identical, input-ordered
//! output. Building without the `parallel` feature compiles the rayon path
//! out entirely; [`ExecMode::Parallel`] then silently runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Maps `f` over `items`, returning results in input order.
pub fn map_indexed<T, R, F>(items: &[T], mode: ExecMode, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = mode;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Like [`map_indexed`] but never runs more than `limit` calls at once.
pub fn map_bounded<T, R, F>(items: &[T], mode: ExecMode, limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() && limit > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(limit).build() {
            return pool.install(|| map_indexed(items, mode, f));
        }
    }
    let _ = (&mode, limit);
    map_indexed(items, ExecMode::Sequential, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map_indexed(&xs, ExecMode::Parallel, |i, x| (i as u64) * 31 + x);
        let b = map_indexed(&xs, ExecMode::Sequential, |i, x| (i as u64) * 31 + x);
        assert_eq!(a, b);
        let c = map_bounded(&xs, ExecMode::Parallel, 3, |i, x| (i as u64) * 31 + x);
        assert_eq!(a, c);
    }

    #[test]
    fn empty_input() {
        let xs: Vec<u8> = vec![];
        assert!(map_indexed(&xs, ExecMode::Parallel, |_, x| *x).is_empty());
    }
}
