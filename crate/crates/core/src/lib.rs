//! Mask-aware serving for generative image editing.
//!
//! The crate is organised bottom-up:
//!
//! * [`types`], [`clock`], [`rng`], [`metrics`]: shared value types, time
//!   sources, seeded random substreams and percentile summaries.
//! * [`kernel`]: a dense single-head transformer block with full and
//!   mask-aware forward passes (output-activation cache and K/V cache).
//! * [`latmodel`]: FLOP/byte accounting and the affine latency regressions.
//! * [`planner`]: per-block cache-use planning and the two-lane executor.
//! * [`cache`]: the memory/disk activation store with LRU and pinning.
//! * [`worker`], [`scheduler`]: the batching worker and the cluster router.
//! * [`workload`]: trace generation, discrete-event replay and reporting.

pub mod cache;
pub mod clock;
pub mod config;
pub mod error;
pub mod kernel;
pub mod latmodel;
pub mod metrics;
pub mod planner;
pub mod rng;
pub mod scheduler;
pub mod types;
pub mod worker;
pub mod workload;

pub use error::{Error, Result};
pub use types::{MaskSpec, Nanos, RequestId, RequestRecord, TokenGrid};
