//! Forward and backward numeric kernels for every layer kind in a model graph.
//!
//! Kernels are pure functions of their arguments. Convolutions may split work
//! over output planes across threads (see [`set_threads`]); each plane is
//! computed by exactly one thread with a fixed summation order, so results are
//! bit-identical for any thread count.

mod basic;
mod batchnorm;
mod conv;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use basic::{
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward,
    relu_backward, relu_forward, softmax_cross_entropy, LinearParams,
};
pub use batchnorm::{
    batchnorm_apply, batchnorm_backward, batchnorm_forward, BatchNormParams, BatchStats, BN_EPS,
    BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvParams, FILTER_AXIS};

/// Whether batch norm normalizes with batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Caps the number of threads convolution kernels may use. Zero is treated as one.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Calls `f(i, chunk)` for every `chunk_len`-sized chunk of `out`.
pub(crate) fn for_each_chunk<F>(out: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    if chunk_len == 0 {
        return;
    }
    let chunks = out.len() / chunk_len;
    let workers = threads().min(chunks);
    if workers <= 1 {
        for (i, c) in out.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
        return;
    }
    let per_worker = chunks.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, span) in out.chunks_mut(per_worker * chunk_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, c) in span.chunks_mut(chunk_len).enumerate() {
                    f(w * per_worker + j, c);
                }
            });
        }
    });
}
