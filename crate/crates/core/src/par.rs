//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled (the default) the helpers dispatch onto
//! rayon's global pool when the caller asks for it. Without the feature every
//! call runs on the calling thread. Results are always collected in input
//! order, and reductions are performed sequentially over the collected
//! partials, so output is bit-identical whether or not parallelism is used.

/// Whether parallel execution is compiled in.
pub const fn available() -> bool {
    cfg!(feature = "parallel")
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_range<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, collecting results in order.
pub fn map_slice<S, T, F>(items: &[S], parallel: bool, f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Deterministic sum of `f(i)` for `i` in `0..n`.
///
/// Partials are computed (possibly in parallel) and summed left to right.
pub fn sum_range<F>(n: usize, parallel: bool, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map_range(n, parallel, f).into_iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let f = |i: usize| ((i as f64) * 0.1).sin() / (1.0 + i as f64);
        let a = sum_range(10_000, true, f);
        let b = sum_range(10_000, false, f);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(map_range(5, true, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }
}
