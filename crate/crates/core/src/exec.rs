//! Parallel/sequential execution shim. Independent work items (experiment
//! repetitions, verification batches) run data-parallel under the `parallel`
//! feature and fall back to a plain loop without it. Results come back in
//! index order either way, so outputs are identical across both builds.

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
