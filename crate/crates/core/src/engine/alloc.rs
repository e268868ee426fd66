//! Live tensor-byte accounting with a high-water mark.
//!
//! Every [`Tensor`](super::Tensor) buffer registers its size here when it is
//! created and releases it when dropped. Counters are per thread: a training
//! step and all of its tensors live on one thread, and parallel kernels only
//! write into buffers allocated by the calling thread.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn register(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn release(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes held by tensors alive on the current thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark of [`live_bytes`] since the last reset.
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the high-water mark to the current live level.
pub fn reset_peak() {
    PEAK.with(|peak| peak.set(live_bytes()));
}

/// Runs `f` and returns its result with the high-water mark of live tensor
/// bytes observed while it ran. Bytes already live on entry (parameters,
/// optimizer state, inputs) are part of the mark.
///
/// The enclosing high-water mark is restored afterwards, so measurements
/// nest.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let outer = peak_bytes();
    reset_peak();
    let out = f();
    let inner = peak_bytes();
    PEAK.with(|peak| peak.set(outer.max(inner)));
    (out, inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Shape, Tensor};

    #[test]
    fn single_allocation() {
        let (_, peak) = measure_peak(|| {
            let t = Tensor::zeros(Shape::new(1, 1, 10, 10, 10));
            drop(t);
        });
        assert_eq!(peak - live_bytes(), 4000);
    }

    #[test]
    fn allocate_free_allocate_counts_once() {
        let base = live_bytes();
        let (_, peak) = measure_peak(|| {
            let a = Tensor::zeros(Shape::new(1, 1, 1, 1, 1000));
            drop(a);
            let b = Tensor::zeros(Shape::new(1, 1, 1, 1, 1000));
            drop(b);
        });
        assert_eq!(peak - base, 4000);
        assert_eq!(live_bytes(), base);
    }

    #[test]
    fn nested_measurements_restore_outer_peak() {
        let base = live_bytes();
        let (_, outer) = measure_peak(|| {
            let big = Tensor::zeros(Shape::new(1, 1, 1, 1, 2000));
            drop(big);
            let (_, inner) = measure_peak(|| Tensor::zeros(Shape::new(1, 1, 1, 1, 10)));
            assert_eq!(inner - base, 40);
        });
        assert_eq!(outer - base, 8000);
    }
}
