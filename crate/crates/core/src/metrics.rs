//! Percentiles and summary statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Nanos;

/// Nearest-rank percentile: the `ceil(p * n)`-th smallest sample.
pub fn percentile<T: Copy + Ord>(samples: &[T], p: f64) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::invalid("percentile of an empty sample"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!(
            "percentile rank {p} outside (0, 1]"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    Ok(sorted[nearest_rank(sorted.len(), p) - 1])
}

fn nearest_rank(n: usize, p: f64) -> usize {
    // p * n can land a hair above an integer (0.95 * 20 = 19.000000000000004)
    let x = p * n as f64;
    let r = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    (r as usize).clamp(1, n)
}

/// Mean, median and p95 of a set of durations, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    pub fn of_nanos(samples: &[Nanos]) -> Summary {
        if samples.is_empty() {
            return Summary::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let total: u128 = sorted.iter().map(|d| u128::from(d.0)).sum();
        Summary {
            count: n,
            mean: total as f64 / n as f64 * 1e-9,
            median: sorted[nearest_rank(n, 0.5) - 1].as_secs_f64(),
            p95: sorted[nearest_rank(n, 0.95) - 1].as_secs_f64(),
            max: sorted[n - 1].as_secs_f64(),
        }
    }

    pub fn of_counts(samples: &[u32]) -> Summary {
        let as_nanos: Vec<Nanos> = samples.iter().map(|c| Nanos(u64::from(*c))).collect();
        let s = Summary::of_nanos(&as_nanos);
        Summary {
            count: s.count,
            mean: s.mean * 1e9,
            median: s.median * 1e9,
            p95: s.p95 * 1e9,
            max: s.max * 1e9,
        }
    }
}
