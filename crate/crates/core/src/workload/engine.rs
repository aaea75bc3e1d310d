//! Replays a trace through a router and a set of workers on the virtual
//! timeline.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::report::{write_request_csv, RequestRow, RunReport, WorkerUtilization};
use super::trace::{generate, read_trace, trace_digest, write_trace, MaskDist, TraceRecord};
use crate::cache::ActivationCache;
use crate::clock::ClockMode;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::latmodel::LatencyModel;
use crate::metrics::Summary;
use crate::scheduler::{
    run_dispatch_loop, CostModel, Dispatcher, RequestView, RoutingPolicy, RoutingRecord,
};
use crate::types::{Nanos, RequestRecord};
use crate::worker::{
    prewarm_template, request, MemberSummary, StepTiming, Worker, WorkerEvent, WorkerSnapshot,
};

/// Wall-clock costs of the control plane, kept out of the report so the
/// report stays reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub routing_decision: Summary,
    pub step_bookkeeping: Summary,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub rows: Vec<RequestRow>,
    pub trace: Vec<TraceRecord>,
    pub worker_logs: Vec<Vec<WorkerEvent>>,
    pub routing_log: Vec<RoutingRecord>,
    pub overhead: Overhead,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(&path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

impl RunOutput {
    /// Writes the report, tables and logs into `dir`, creating it.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(dir, "report.json", &self.report.to_json())?;
        write_text(
            dir,
            "overhead.json",
            &serde_json::to_string_pretty(&self.overhead).expect("overhead serialises"),
        )?;
        write_request_csv(&self.rows, create(dir, "requests.csv")?)?;
        write_trace(&self.trace, create(dir, "trace.jsonl")?)?;
        let mut routing = create(dir, "routing.jsonl")?;
        for r in &self.routing_log {
            serde_json::to_writer(&mut routing, r).map_err(|e| Error::State(e.to_string()))?;
            std::io::Write::write_all(&mut routing, b"\n").map_err(|e| Error::io(dir, e))?;
        }
        let mut events = create(dir, "events.jsonl")?;
        for e in self.worker_logs.iter().flatten() {
            serde_json::to_writer(&mut events, e).map_err(|e| Error::State(e.to_string()))?;
            std::io::Write::write_all(&mut events, b"\n").map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }
}

/// The configured trace file, or a trace generated from the config.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Vec<TraceRecord>> {
    match &cfg.workload.trace {
        Some(path) => {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            read_trace(std::io::BufReader::new(f))
        }
        None => generate(&cfg.trace_spec()),
    }
}

/// Loads or generates the trace and replays it.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let trace = load_or_generate(cfg)?;
    let model = cfg.latency_model()?;
    replay(cfg, &model, trace)
}

fn timeline_end(trace: &[TraceRecord], cfg: &RunConfig) -> Nanos {
    match &cfg.workload.trace {
        Some(_) => trace.last().map_or(Nanos::ZERO, |r| r.arrival_ns),
        None => cfg.trace_spec().horizon(),
    }
}

/// Replays `trace` through a fresh cluster built from `cfg`.
pub fn replay(cfg: &RunConfig, model: &LatencyModel, trace: Vec<TraceRecord>) -> Result<RunOutput> {
    let model = Arc::new(model.clone());
    let wcfg = cfg.worker_config(&model)?;
    let cache = ActivationCache::simulated(cfg.memory_capacity_bytes, cfg.disk_capacity_bytes);
    if cfg.cache_enabled && cfg.prewarm {
        let templates: BTreeSet<(&str, u32)> = trace
            .iter()
            .map(|r| (r.template_id.as_str(), r.steps_total))
            .collect();
        for (t, steps) in templates {
            prewarm_template(&cache, &wcfg, t, steps)?;
        }
    }
    let timing = match cfg.clock {
        ClockMode::Virtual => StepTiming::Virtual,
        ClockMode::Wall => StepTiming::Live {
            dilation: cfg.dilation,
        },
    };
    let mut workers = (0..cfg.workers)
        .map(|id| {
            let w = Worker::new(id, wcfg, model.clone())?.with_timing(timing);
            Ok(if cfg.cache_enabled {
                w.with_cache(cache.clone())
            } else {
                w
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let costs = CostModel::new(
        model.clone(),
        cfg.tokens,
        cfg.hidden,
        cfg.n_blocks,
        cfg.cost_planner,
        cfg.tie,
    )?;
    let step = Worker::single_step_latency(&wcfg, &model, 1.0)?;
    let staleness = Nanos((step.0 as f64 * cfg.staleness_steps).round() as u64);
    let policy = RoutingPolicy {
        kind: cfg.routing,
        queue_bound: cfg.queue_bound,
    };
    let mut dispatcher = Dispatcher::new(policy, costs, staleness);
    if cfg.cache_enabled {
        dispatcher = dispatcher.with_cache(cache.clone());
    }

    let requests = trace
        .iter()
        .enumerate()
        .map(|(i, r)| {
            // Without a cache every token is recomputed.
            let m = if cfg.cache_enabled { r.mask_ratio } else { 1.0 };
            request(i as u64, &r.template_id, m, r.steps_total, r.arrival_ns)
        })
        .collect::<Result<Vec<RequestRecord>>>()?;
    run_dispatch_loop(requests, &mut workers, &mut dispatcher)?;
    for w in workers.iter_mut() {
        w.drain()?;
    }

    let mut completed: Vec<_> = workers
        .iter_mut()
        .flat_map(|w| w.take_completed())
        .collect();
    completed.sort_by_key(|c| c.record.id);
    let rows = completed
        .iter()
        .map(RequestRow::from_completed)
        .collect::<Result<Vec<_>>>()?;
    let rejected = dispatcher.rejected().len();
    if rows.len() + rejected != trace.len() {
        return Err(Error::State(format!(
            "{} arrivals but {} completed and {rejected} rejected",
            trace.len(),
            rows.len()
        )));
    }

    let horizon = timeline_end(&trace, cfg);
    let span = horizon
        .0
        .max(rows.iter().map(|r| r.done_ns).max().unwrap_or(0));
    let utilization = workers
        .iter()
        .map(|w| WorkerUtilization {
            worker_id: w.id(),
            steps: w.stats().steps,
            denoise_busy: if span == 0 {
                0.0
            } else {
                w.stats().denoise_busy.0 as f64 / span as f64
            },
            fallbacks: w.stats().fallbacks,
        })
        .collect();
    let mut notes = Vec::new();
    if cfg.workload.trace.is_none() {
        if let MaskDist::Preset(p) = &cfg.workload.mask_dist {
            notes.push(format!(
                "mask ratios follow the synthetic `{}` histogram (mean {}), an approximation of production traces",
                serde_json::to_value(p).expect("preset serialises").as_str().unwrap_or("preset"),
                p.target_mean()
            ));
        }
    }
    if cfg.clock == ClockMode::Wall {
        notes.push(format!(
            "step latencies measured on live lanes at dilation {}",
            cfg.dilation
        ));
    }
    let label = format!("{}+{}", cfg.batching, cfg.routing);
    let report = RunReport::build(
        label,
        notes,
        serde_json::to_value(cfg).expect("config serialises"),
        trace_digest(&trace),
        trace.len(),
        rejected,
        horizon,
        &rows,
        utilization,
        cache.stats(),
    );

    let decisions: Vec<Nanos> = dispatcher
        .decision_times()
        .iter()
        .map(|d| Nanos::from(*d))
        .collect();
    let bookkeeping: Vec<Nanos> = workers
        .iter()
        .flat_map(|w| w.stats().bookkeeping.iter().map(|d| Nanos::from(*d)))
        .collect();
    Ok(RunOutput {
        report,
        rows,
        trace,
        worker_logs: workers.iter().map(|w| w.event_log().to_vec()).collect(),
        routing_log: dispatcher.routing_log().to_vec(),
        overhead: Overhead {
            routing_decision: Summary::of_nanos(&decisions),
            step_bookkeeping: Summary::of_nanos(&bookkeeping),
        },
    })
}

/// Arrival rate the cluster sustains when every worker runs full batches
/// of requests with ratio `mask_ratio`.
pub fn capacity_rps(cfg: &RunConfig, model: &LatencyModel, mask_ratio: f64) -> Result<f64> {
    let mut costs = CostModel::new(
        Arc::new(model.clone()),
        cfg.tokens,
        cfg.hidden,
        cfg.n_blocks,
        cfg.cost_planner,
        cfg.tie,
    )?;
    let member = |i: usize| MemberSummary {
        request_id: i as u64,
        mask_ratio,
        remaining_steps: cfg.steps_total,
    };
    let snap = WorkerSnapshot {
        worker_id: 0,
        taken_at: Nanos::ZERO,
        policy: cfg.batching,
        max_batch: cfg.max_batch,
        members: Vec::new(),
        queued: (0..cfg.max_batch - 1).map(member).collect(),
        queue_depth: cfg.max_batch - 1,
    };
    let view = RequestView {
        id: u64::MAX,
        mask_ratio,
        steps: cfg.steps_total,
    };
    let batch_time = costs.calc_cost(&view, &snap)?.predicted_latency;
    Ok(cfg.workers as f64 * cfg.max_batch as f64 / batch_time.as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latmodel::{calibrate, default_sim_grid, SimulatedBackend};
    use crate::worker::BatchingPolicy;
    use crate::workload::MaskPreset;

    fn model() -> LatencyModel {
        calibrate(&mut SimulatedBackend::default(), &default_sim_grid(), 1)
            .unwrap()
            .model
    }

    fn small(rps: f64, duration_s: f64) -> RunConfig {
        let mut cfg = RunConfig {
            workers: 2,
            steps_total: 10,
            ..RunConfig::default()
        };
        cfg.workload.rps = rps;
        cfg.workload.duration_s = duration_s;
        cfg
    }

    #[test]
    fn empty_trace_gives_an_empty_report() {
        let cfg = small(1.0, 0.0);
        let out = replay(&cfg, &model(), Vec::new()).unwrap();
        assert_eq!(out.report.requests, 0);
        assert_eq!(out.report.throughput_rps, 0.0);
        assert!(out.routing_log.is_empty());
    }

    #[test]
    fn lone_request_matches_the_closed_form() {
        let mut cfg = small(1.0, 10.0);
        cfg.workers = 1;
        let model = model();
        let trace = vec![TraceRecord {
            arrival_ns: Nanos::from_millis(5),
            template_id: "tmpl-0".into(),
            mask_ratio: 0.2,
            steps_total: cfg.steps_total,
        }];
        let out = replay(&cfg, &model, trace).unwrap();
        let w = cfg.worker_config(&model).unwrap();
        let step = Worker::single_step_latency(&w, &model, 0.2).unwrap();
        let expect = w.d_pre + step * u64::from(cfg.steps_total) + w.d_post;
        let row = &out.rows[0];
        assert_eq!(row.queuing_ns, 0);
        assert_eq!(row.e2e_ns, expect.0);
    }

    #[test]
    fn replay_is_deterministic_and_conserves_requests() {
        let cfg = small(3.0, 20.0);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.report.completed + a.report.rejected, a.report.requests);
        assert!(a.report.requests > 0);
        for r in &a.rows {
            assert_eq!(
                a.worker_logs
                    .iter()
                    .flatten()
                    .filter(|e| e.request_id == Some(r.request_id)
                        && e.event == crate::worker::EventKind::Submit)
                    .count(),
                1
            );
        }
    }

    #[test]
    fn low_load_throughput_tracks_offered_load() {
        let mut cfg = small(0.5, 2000.0);
        cfg.workload.mask_dist = MaskDist::Preset(MaskPreset::Light);
        let out = run(&cfg).unwrap();
        let r = &out.report;
        assert!(r.throughput_rps <= r.offered_rps);
        assert!((r.throughput_rps - r.offered_rps).abs() / r.offered_rps < 0.01);
    }

    #[test]
    fn cache_off_runs_dense() {
        let mut cfg = small(1.0, 10.0);
        cfg.cache_enabled = false;
        let out = run(&cfg).unwrap();
        assert!(out.rows.iter().all(|r| r.mask_ratio == 1.0));
        assert_eq!(out.report.cache.hits_mem, 0);
    }

    #[test]
    fn capacity_grows_with_workers() {
        let model = model();
        let one = capacity_rps(&small(1.0, 1.0), &model, 0.11).unwrap();
        let mut cfg = small(1.0, 1.0);
        cfg.workers = 4;
        let four = capacity_rps(&cfg, &model, 0.11).unwrap();
        assert!((four / one - 2.0).abs() < 1e-9);
        cfg.batching = BatchingPolicy::Static;
        assert!((capacity_rps(&cfg, &model, 0.11).unwrap() - four).abs() < 1e-9);
    }

    #[test]
    fn run_directory_holds_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&small(2.0, 5.0)).unwrap();
        out.write_dir(dir.path()).unwrap();
        for f in [
            "report.json",
            "overhead.json",
            "requests.csv",
            "trace.jsonl",
            "routing.jsonl",
            "events.jsonl",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        assert_eq!(RunReport::from_json(&back).unwrap(), out.report);
    }
}
