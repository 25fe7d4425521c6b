//! A counting global allocator for memory audits.
//!
//! Register it in a binary or test with
//! `#[global_allocator] static A: npcrf::alloc_audit::CountingAllocator = npcrf::alloc_audit::CountingAllocator;`
//! and bracket the code under audit with [`reset`] and [`snapshot`].
//! Without registration the counters stay at zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static LARGEST: AtomicUsize = AtomicUsize::new(0);
static COUNT: AtomicUsize = AtomicUsize::new(0);

pub struct CountingAllocator;

fn record(size: usize) {
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
    LARGEST.fetch_max(size, Ordering::Relaxed);
    COUNT.fetch_add(1, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            record(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            record(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            record(new_size);
        }
        p
    }
}

/// Allocation statistics since the last [`reset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct AllocStats {
    /// Peak live bytes above the level at reset.
    pub peak_extra_bytes: usize,
    pub largest_allocation: usize,
    pub allocations: usize,
}

static BASELINE: AtomicUsize = AtomicUsize::new(0);

pub fn reset() {
    let now = CURRENT.load(Ordering::Relaxed);
    BASELINE.store(now, Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    LARGEST.store(0, Ordering::Relaxed);
    COUNT.store(0, Ordering::Relaxed);
}

pub fn snapshot() -> AllocStats {
    AllocStats {
        peak_extra_bytes: PEAK
            .load(Ordering::Relaxed)
            .saturating_sub(BASELINE.load(Ordering::Relaxed)),
        largest_allocation: LARGEST.load(Ordering::Relaxed),
        allocations: COUNT.load(Ordering::Relaxed),
    }
}

/// True when [`CountingAllocator`] is the registered global allocator.
pub fn is_active() -> bool {
    let before = COUNT.load(Ordering::Relaxed);
    let v = std::hint::black_box(vec![0u8; 64]);
    drop(v);
    COUNT.load(Ordering::Relaxed) != before
}
