//! Experiment runner: configuration files, training orchestration,
//! checkpoints and metric records.

pub mod config;
pub mod error;
pub mod records;
pub mod run;

pub use config::{AblateSpec, ExperimentConfig};
pub use error::{CliError, CliResult};

/// Keeps freed buffers in the heap instead of returning them to the kernel.
/// Training allocates and drops many tensors of a few hundred kilobytes per
/// step, and glibc would otherwise map and unmap each one.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
