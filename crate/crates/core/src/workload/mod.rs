//! Synthetic traces, trace replay and run reports.

mod engine;
mod report;
mod trace;

pub use engine::*;
pub use report::*;
pub use trace::*;
