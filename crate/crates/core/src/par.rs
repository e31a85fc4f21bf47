//! Data-parallel map over independent runs. With the `parallel` feature the
//! work goes to rayon; without it everything runs on the calling thread.

/// Apply `f` to every item on the calling thread.
pub fn map_sequential<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Apply `f` to every item, in parallel when enabled, capped at `threads`
/// workers if given. Output order matches input order.
#[cfg(feature = "parallel")]
pub fn map<T: Sync, R: Send>(items: &[T], threads: Option<usize>, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    match threads {
        Some(1) => map_sequential(items, f),
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => map_sequential(items, f),
        },
        None => items.par_iter().map(&f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<T: Sync, R: Send>(items: &[T], _threads: Option<usize>, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    map_sequential(items, f)
}

pub const PARALLEL: bool = cfg!(feature = "parallel");
