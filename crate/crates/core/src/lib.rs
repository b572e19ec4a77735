//! Link prediction over knowledge graphs.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a small dense differentiable core (f64 tensors, explicit
//!   forward/backward kernels, batch norm, dropout, Adam and AdaGrad).
//! - [`data`]: triple ingestion, vocabularies, split indexes and reciprocal
//!   relation augmentation.
//! - [`models`]: TransE, DistMult, ComplEx and ConvE scoring, parameter
//!   initialisation, counting and checkpoints.
//! - [`training`]: 1-N binary cross-entropy and 1-1 margin training loops with
//!   early stopping.
//! - [`eval`]: the filtered ranking protocol (MR, MRR, Hits@k) and AUC-PR.
//! - [`inverse`]: the rule-based inverse-relation model and leakage audit.
//! - [`graph`]: PageRank, relation-specific indegree and dataset derivation.
//! - [`config`]: flat `key=value` configuration files.
//!
//! Data-parallel loops go through [`par`], which maps onto rayon when the
//! `parallel` feature is enabled and onto plain iterators otherwise. Results
//! are identical in both builds.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod inverse;
pub mod models;
pub mod par;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};

/// Seedable generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Creates the crate's generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream of the master generator, e.g. one per test
/// triple, so results do not depend on scheduling order.
pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut rng = rng_from_seed(seed);
    rng.set_stream(stream);
    rng
}

/// Keeps freed heap memory in the process instead of handing it back to the
/// kernel. A training step allocates and drops buffers of several megabytes;
/// with glibc's defaults each one is mapped and unmapped again, and the page
/// faults cost about a third of the run time. No-op on other platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        // 1 GiB: larger blocks still get their own mapping
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
