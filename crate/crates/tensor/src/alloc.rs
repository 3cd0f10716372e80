//! Allocator tuning for workloads that churn large temporaries.

/// Keeps freed large blocks in the heap instead of returning them to the OS.
///
/// Call once at startup, before any threads exist. No-op on other platforms.
pub fn retain_large_allocations() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        const LIMIT: libc::c_int = 1 << 30;
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, LIMIT);
            libc::mallopt(libc::M_TRIM_THRESHOLD, LIMIT);
        }
    }
}
