//! Dispatch between rayon and sequential execution.
//!
//! All parallelism in this crate goes through these helpers. They only ever
//! split work across disjoint output chunks; each chunk is filled by the
//! same sequential code on both paths, so enabling the `parallel` feature
//! cannot change any computed value.

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of
/// `data`. `par_hint` signals that the total work is large enough to be
/// worth distributing; small calls stay on the current thread either way.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, par_hint: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par_hint {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = par_hint;
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Work threshold (in multiply-adds or comparable scalar ops) above which
/// a loop is handed to rayon.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;
