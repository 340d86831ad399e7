// Per-thread accounting of live tensor bytes. Tensors dropped on a thread other
// than the one that allocated them saturate at zero instead of wrapping.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

const ELEM: usize = std::mem::size_of::<f32>();

pub(super) fn track_alloc(elems: usize) {
    LIVE.with(|live| {
        let now = live.get() + elems * ELEM;
        live.set(now);
        PEAK.with(|peak| peak.set(peak.get().max(now)));
    });
}

pub(super) fn track_free(elems: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(elems * ELEM)));
}

/// Bytes of tensor storage currently alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Reset the high-water mark to the current live byte count.
pub fn reset_peak() {
    let now = live_bytes();
    PEAK.with(|peak| peak.set(now));
}
