//! Per-thread accounting of live tensor storage.
//!
//! Every [`crate::Tensor`] registers its buffer on creation and releases it on
//! drop, so `peak_bytes` after a forward pass is the high-water mark of tensor
//! data that was simultaneously alive on this thread.

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

/// Bytes of tensor data currently alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the high-water mark to the current live total.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}

/// Runs `f` and returns its result together with the peak number of bytes
/// allocated above the live baseline at entry.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let baseline = live_bytes();
    let outer_peak = peak_bytes();
    reset_peak();
    let out = f();
    let peak = peak_bytes().saturating_sub(baseline);
    PEAK.with(|p| p.set(p.get().max(outer_peak)));
    (out, peak)
}
