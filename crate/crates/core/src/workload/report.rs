//! Run reports, per-request tables and report comparison.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cache::CacheStats;
use crate::error::{Error, Result};
use crate::metrics::Summary;
use crate::types::Nanos;
use crate::worker::Completed;

/// Per-request timings derived from a completed record, in nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub request_id: u64,
    pub worker_id: usize,
    pub template_id: String,
    pub mask_ratio: f64,
    pub arrival_ns: u64,
    pub done_ns: u64,
    pub e2e_ns: u64,
    pub queuing_ns: u64,
    pub inference_ns: u64,
    pub interruptions: u32,
    pub cold: bool,
}

impl RequestRow {
    pub fn from_completed(c: &Completed) -> Result<RequestRow> {
        let r = &c.record;
        let need = |t: Option<Nanos>, what: &str| {
            t.ok_or_else(|| Error::State(format!("request {} finished without {what}", r.id)))
        };
        let enqueue = need(r.t_enqueue, "an enqueue time")?;
        let pre_start = need(r.t_prestart, "a preprocessing start")?;
        let pre_end = need(r.t_pre_end, "a preprocessing end")?;
        let denoise_start = need(r.t_denoise_start, "a denoising start")?;
        let denoise_end = need(r.t_denoise_end, "a denoising end")?;
        let done = need(r.t_done, "a completion time")?;
        // Waiting for the preprocessing lane plus waiting for a batch slot.
        let queuing = pre_start.saturating_sub(enqueue) + denoise_start.saturating_sub(pre_end);
        Ok(RequestRow {
            request_id: r.id,
            worker_id: c.worker_id,
            template_id: r.template_id.clone(),
            mask_ratio: r.mask.ratio(),
            arrival_ns: r.arrival.0,
            done_ns: done.0,
            e2e_ns: done.saturating_sub(r.arrival).0,
            queuing_ns: queuing.0,
            inference_ns: denoise_end.saturating_sub(denoise_start).0,
            interruptions: c.interruptions,
            cold: c.cold,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerUtilization {
    pub worker_id: usize,
    pub steps: u64,
    /// Fraction of the run the denoise lane was occupied.
    pub denoise_busy: f64,
    pub fallbacks: u64,
}

/// Aggregate metrics of one run. Times are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub notes: Vec<String>,
    /// The configuration that produced the run, as JSON.
    pub config: serde_json::Value,
    pub trace_digest: String,
    pub requests: usize,
    pub completed: usize,
    pub rejected: usize,
    pub e2e: Summary,
    pub queuing: Summary,
    pub inference: Summary,
    pub interruptions: Summary,
    pub offered_rps: f64,
    pub throughput_rps: f64,
    pub workers: Vec<WorkerUtilization>,
    pub cold_requests: usize,
    pub fallback_steps: u64,
    pub cache: CacheStats,
}

impl RunReport {
    /// Aggregates `rows` for a trace spanning `horizon`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        label: impl Into<String>,
        notes: Vec<String>,
        config: serde_json::Value,
        trace_digest: String,
        requests: usize,
        rejected: usize,
        horizon: Nanos,
        rows: &[RequestRow],
        workers: Vec<WorkerUtilization>,
        cache: CacheStats,
    ) -> RunReport {
        let pick = |f: fn(&RequestRow) -> u64| rows.iter().map(|r| Nanos(f(r))).collect::<Vec<_>>();
        let interruptions: Vec<u32> = rows.iter().map(|r| r.interruptions).collect();
        let last_done = rows.iter().map(|r| r.done_ns).max().unwrap_or(0);
        let span = horizon.0.max(last_done);
        let fallback_steps = workers.iter().map(|w| w.fallbacks).sum();
        let per_sec = |n: usize, ns: u64| {
            if ns == 0 {
                0.0
            } else {
                n as f64 / (ns as f64 * 1e-9)
            }
        };
        RunReport {
            label: label.into(),
            notes,
            config,
            trace_digest,
            requests,
            completed: rows.len(),
            rejected,
            e2e: Summary::of_nanos(&pick(|r| r.e2e_ns)),
            queuing: Summary::of_nanos(&pick(|r| r.queuing_ns)),
            inference: Summary::of_nanos(&pick(|r| r.inference_ns)),
            interruptions: Summary::of_counts(&interruptions),
            offered_rps: per_sec(requests, horizon.0),
            throughput_rps: per_sec(rows.len(), span),
            workers,
            cold_requests: rows.iter().filter(|r| r.cold).count(),
            fallback_steps,
            cache,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Scalar metrics in a fixed order, for comparison tables.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("requests", self.requests as f64),
            ("completed", self.completed as f64),
            ("rejected", self.rejected as f64),
        ];
        for (names, s) in [
            (["e2e_mean_s", "e2e_median_s", "e2e_p95_s"], &self.e2e),
            (
                ["queuing_mean_s", "queuing_median_s", "queuing_p95_s"],
                &self.queuing,
            ),
            (
                ["inference_mean_s", "inference_median_s", "inference_p95_s"],
                &self.inference,
            ),
            (
                [
                    "interruptions_mean",
                    "interruptions_median",
                    "interruptions_p95",
                ],
                &self.interruptions,
            ),
        ] {
            out.extend(names.into_iter().zip([s.mean, s.median, s.p95]));
        }
        let util = if self.workers.is_empty() {
            0.0
        } else {
            self.workers.iter().map(|w| w.denoise_busy).sum::<f64>() / self.workers.len() as f64
        };
        out.extend([
            ("offered_rps", self.offered_rps),
            ("throughput_rps", self.throughput_rps),
            ("mean_worker_utilization", util),
            ("cold_requests", self.cold_requests as f64),
            ("fallback_steps", self.fallback_steps as f64),
            ("cache_hits_mem", self.cache.hits_mem as f64),
            ("cache_misses", self.cache.misses as f64),
        ]);
        out
    }
}

pub fn write_request_csv<W: Write>(rows: &[RequestRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::State(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<request table>", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    /// `(b - a) / a`; absent when `a` is zero.
    pub rel_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<DeltaRow>,
    pub warnings: Vec<String>,
}

impl DeltaTable {
    pub fn row(&self, metric: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::State(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<delta table>", e))
    }

    /// Fixed-width text rendering.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<26} {:>14} {:>14} {:>14} {:>9}\n",
            "metric", self.label_a, self.label_b, "delta", "rel"
        );
        for r in &self.rows {
            let rel = r
                .rel_delta
                .map_or("-".to_string(), |x| format!("{:+.1}%", x * 100.0));
            s.push_str(&format!(
                "{:<26} {:>14.6} {:>14.6} {:>+14.6} {:>9}\n",
                r.metric, r.a, r.b, r.delta, rel
            ));
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}

/// Config keys that are expected to differ between compared runs.
const VARIED_KEYS: [&str; 5] = ["batching", "routing", "planner", "tie", "cache_enabled"];

/// Metric-by-metric deltas of `b` against `a`. Configurations differing
/// beyond the policy switches are flagged, not refused.
pub fn compare(a: &RunReport, b: &RunReport) -> DeltaTable {
    let rows = a
        .metrics()
        .into_iter()
        .zip(b.metrics())
        .map(|((name, va), (_, vb))| DeltaRow {
            metric: name.to_string(),
            a: va,
            b: vb,
            delta: vb - va,
            rel_delta: (va != 0.0).then(|| (vb - va) / va),
        })
        .collect();
    let mut warnings = Vec::new();
    if a.trace_digest != b.trace_digest {
        warnings.push("reports replay different traces".to_string());
    }
    if let (Some(ca), Some(cb)) = (a.config.as_object(), b.config.as_object()) {
        let mut keys: Vec<&String> = ca.keys().chain(cb.keys()).collect();
        keys.sort();
        keys.dedup();
        for k in keys {
            if !VARIED_KEYS.contains(&k.as_str()) && ca.get(k) != cb.get(k) {
                warnings.push(format!("config field `{k}` differs"));
            }
        }
    }
    DeltaTable {
        label_a: a.label.clone(),
        label_b: b.label.clone(),
        rows,
        warnings,
    }
}
