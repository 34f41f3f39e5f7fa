//! Global allocator that tracks live and peak heap bytes.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering::Relaxed};

use hetreg_core::train::StepProbe;

pub struct CountingAlloc;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grow(bytes: usize) {
    let now = LIVE.fetch_add(bytes, Relaxed) + bytes;
    PEAK.fetch_max(now, Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                grow(new_size - layout.size());
            } else {
                LIVE.fetch_sub(layout.size() - new_size, Relaxed);
            }
        }
        p
    }
}

pub fn live_bytes() -> usize {
    LIVE.load(Relaxed)
}

/// Restarts peak tracking from the current live size; returns that size.
pub fn reset_peak() -> usize {
    let now = LIVE.load(Relaxed);
    PEAK.store(now, Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Relaxed)
}

/// Peak bytes allocated above the live size at `begin`. Process-wide, so
/// only meaningful while one step runs at a time.
#[derive(Default)]
pub struct AllocProbe {
    base: usize,
}

impl StepProbe for AllocProbe {
    fn begin(&mut self) {
        self.base = reset_peak();
    }

    fn end(&mut self) -> u64 {
        peak_bytes().saturating_sub(self.base) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_sees_a_large_allocation() {
        let mut p = AllocProbe::default();
        p.begin();
        let v = vec![1u8; 64 << 20];
        std::hint::black_box(&v);
        drop(v);
        // other test threads may free memory meanwhile; leave generous slack
        assert!(p.end() >= 32 << 20);
    }
}
