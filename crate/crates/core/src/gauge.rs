//! Live-memory gauge for compute buffers.
//!
//! Every tensor (and every large scratch buffer inside a kernel) registers its
//! byte size with a thread-local gauge on allocation and unregisters on drop.
//! The profiler resets the peak, runs a workload and reads the peak back.
//! Being thread-local, concurrent workloads on other threads do not pollute a
//! measurement, and identical workloads report identical peaks.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn register(bytes: usize) {
    LIVE.with(|l| {
        let live = l.get() + bytes;
        l.set(live);
        PEAK.with(|p| {
            if live > p.get() {
                p.set(live);
            }
        });
    });
}

pub(crate) fn unregister(bytes: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Bytes currently held by tensors and tracked scratch buffers on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(|l| l.get())
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(|p| p.get())
}

/// Resets the peak to the current live count.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

/// RAII registration for a scratch buffer that is not a tensor (im2col
/// matrices and similar). Holds the bytes on the gauge until dropped.
pub struct ScratchGuard {
    bytes: usize,
}

impl ScratchGuard {
    pub fn new(bytes: usize) -> Self {
        register(bytes);
        ScratchGuard { bytes }
    }
}

impl Drop for ScratchGuard {
    fn drop(&mut self) {
        unregister(self.bytes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scratch_guard_tracks_peak() {
        reset_peak();
        let before = live_bytes();
        {
            let _g = ScratchGuard::new(1024);
            assert_eq!(live_bytes(), before + 1024);
        }
        assert_eq!(live_bytes(), before);
        assert!(peak_bytes() >= before + 1024);
    }
}
