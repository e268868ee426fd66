//! Tensor type, differentiable primitives and the operation tape.

pub mod alloc;
pub mod io;
pub mod ops;
mod param;
mod tape;
mod tensor;

use std::sync::atomic::{AtomicBool, Ordering};

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{
    inject_fault, BackwardCtx, BackwardFn, Gradients, NodeId, NodeInfo, Saved, Tape, Var,
};
pub use tensor::{Shape, Tensor};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Configures internal parallelism. `threads <= 1` keeps every kernel on
/// the calling thread. Kernels split work by output channel only, so the
/// result is bit-identical for any thread count.
pub fn set_threads(threads: usize) {
    if threads > 1 {
        // the global pool can only be built once; later calls keep it
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    PARALLEL.store(threads > 1, Ordering::Relaxed);
}

pub(crate) fn parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Runs `f(index, chunk)` over consecutive `chunk_len` chunks of `data`.
pub(crate) fn for_each_chunk<F>(data: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    if parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}
