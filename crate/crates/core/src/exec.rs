//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) the `par_*` functions fan work
//! out over rayon; without it they alias their sequential twins, so callers
//! never branch on the feature. Results are always collected in input order,
//! which keeps every seeded pipeline deterministic regardless of thread
//! count. The benches compare the two paths head to head.

/// Sequential map, always available.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Order-preserving map over `items`, parallel when the feature is on.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Order-preserving map over `items`, parallel when the feature is on.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    seq_map(items, f)
}
