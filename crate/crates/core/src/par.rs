//! Thin switch between rayon-backed and sequential execution.
//!
//! The `parallel` feature (on by default) routes the data-parallel inner
//! loops through rayon. With the feature disabled the same entry points run
//! sequentially, which is useful for profiling and for minimal builds.

/// Applies `f` to every index in `0..n`, writing into the preallocated
/// output slice. Each call owns a disjoint element, so the parallel and
/// sequential schedules produce identical results.
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_iter_mut()
            .enumerate()
            .for_each(|(i, slot)| *slot = f(i));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = f(i);
        }
    }
}

/// Sequential twin of [`fill_indexed`], always available so benchmarks can
/// compare schedules within one build.
pub fn fill_indexed_seq<T, F>(out: &mut [T], f: F)
where
    F: Fn(usize) -> T,
{
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Maps `f` over the items, preserving order.
pub fn map_collect<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(&f).collect()
    }
}

/// Sequential twin of [`map_collect`].
pub fn map_collect_seq<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    F: Fn(&I) -> T,
{
    items.iter().map(&f).collect()
}
