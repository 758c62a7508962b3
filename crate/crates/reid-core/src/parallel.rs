//! Data-parallel dispatch for the O(N²) kernels.
//!
//! Every kernel in this crate computes independent output rows; each row is
//! accumulated in a fixed left-to-right order, so the parallel and sequential
//! paths produce bit-identical results. The `parallel` feature (default on)
//! routes [`Par::Auto`] through rayon; without it both modes run serially.
//! Kernels expose a `*_seq` twin used by the oracle tests and the benches.

/// Execution mode for a kernel invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Par {
    /// Use the rayon pool when the `parallel` feature is enabled.
    Auto,
    /// Always run on the calling thread.
    Never,
}

/// Runs `op(row, chunk)` over `data` split into `chunk_len`-sized rows.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row<T, F>(mode: Par, data: &mut [T], chunk_len: usize, op: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    match mode {
        Par::Auto => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| op(i, chunk));
        }
        Par::Never => {
            for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
                op(i, chunk);
            }
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row<T, F>(_mode: Par, data: &mut [T], chunk_len: usize, op: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        op(i, chunk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_bitwise() {
        let mut a = vec![0.0f64; 12];
        let mut b = vec![0.0f64; 12];
        let fill = |i: usize, chunk: &mut [f64]| {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = (i * 31 + j) as f64 * 0.1;
            }
        };
        for_each_row(Par::Auto, &mut a, 3, fill);
        for_each_row(Par::Never, &mut b, 3, fill);
        assert_eq!(a, b);
    }
}
