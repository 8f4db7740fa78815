//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon pool;
//! without it they run sequentially. Results are always collected in input
//! order, so reductions performed on them afterwards are deterministic
//! regardless of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy chosen at run time. `Parallel` degrades to sequential
/// when the crate is built without the `parallel` feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_with(ExecMode::Parallel, items, f)
}

pub fn map_with<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

pub fn map_range<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Bounds the global pool. Has no effect once the pool has been built, and
/// none at all without the `parallel` feature.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Independent generator for work item `item` of phase `phase`. Items get
/// their own stream so results do not depend on scheduling.
pub fn stream_rng(seed: u64, phase: u64, item: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ phase.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(item);
    rng
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
