//! Experiment configuration: one JSON document whose missing fields take
//! the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clock::ClockMode;
use crate::error::{Error, Result};
use crate::latmodel::{calibrate, default_sim_grid, LatencyModel, SimulatedBackend};
use crate::planner::{PlannerPolicy, TieRule};
use crate::scheduler::RoutingKind;
use crate::types::Nanos;
use crate::worker::{BatchingPolicy, Worker, WorkerConfig};
use crate::workload::{MaskDist, MaskPreset, TraceSpec};

const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub rps: f64,
    pub duration_s: f64,
    pub mask_dist: MaskDist,
    pub template_pool: usize,
    pub zipf_s: f64,
    /// Replay this JSON Lines trace instead of generating one.
    pub trace: Option<PathBuf>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            rps: 2.0,
            duration_s: 300.0,
            mask_dist: MaskDist::Preset(MaskPreset::Light),
            template_pool: 32,
            zipf_s: 1.1,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_blocks: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub steps_total: u32,
    pub workers: usize,
    pub max_batch: usize,
    pub queue_bound: usize,
    pub batching: BatchingPolicy,
    pub routing: RoutingKind,
    pub planner: PlannerPolicy,
    pub tie: TieRule,
    /// Planner used to price hypothetical batches when routing.
    pub cost_planner: PlannerPolicy,
    pub cache_enabled: bool,
    /// Store every trace template's activations before the run.
    pub prewarm: bool,
    pub memory_capacity_bytes: u64,
    pub disk_capacity_bytes: u64,
    /// Defaults to 10% of a dense single-request step.
    pub d_pre_ns: Option<u64>,
    pub d_post_ns: Option<u64>,
    pub pre_lanes: usize,
    pub post_lanes: usize,
    /// Snapshot reuse bound, in dense single-request steps.
    pub staleness_steps: f64,
    /// Fitted model file; without one the simulated backend is calibrated.
    pub latency_model: Option<PathBuf>,
    pub clock: ClockMode,
    /// Wall mode sleeps `1/dilation` of each planned duration.
    pub dilation: f64,
    pub seed: u64,
    pub workload: WorkloadConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_blocks: 28,
            tokens: 4096,
            hidden: 640,
            steps_total: 50,
            workers: 4,
            max_batch: 8,
            queue_bound: 64,
            batching: BatchingPolicy::Disaggregated,
            routing: RoutingKind::MaskAware,
            planner: PlannerPolicy::Greedy,
            tie: TieRule::PreferCompute,
            cost_planner: PlannerPolicy::Optimal,
            cache_enabled: true,
            prewarm: true,
            memory_capacity_bytes: 512 * GIB,
            disk_capacity_bytes: 4096 * GIB,
            d_pre_ns: None,
            d_post_ns: None,
            pre_lanes: 1,
            post_lanes: 1,
            staleness_steps: 1.0,
            latency_model: None,
            clock: ClockMode::Virtual,
            dilation: 1000.0,
            seed: 0,
            workload: WorkloadConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = RunConfig::from_json(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_blocks", self.n_blocks),
            ("tokens", self.tokens),
            ("hidden", self.hidden),
            ("steps_total", self.steps_total as usize),
            ("workers", self.workers),
            ("max_batch", self.max_batch),
            ("queue_bound", self.queue_bound),
            ("pre_lanes", self.pre_lanes),
            ("post_lanes", self.post_lanes),
            ("workload.template_pool", self.workload.template_pool),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.memory_capacity_bytes == 0 {
            return Err(Error::invalid("memory_capacity_bytes must be >= 1"));
        }
        if !(self.staleness_steps.is_finite() && self.staleness_steps >= 0.0) {
            return Err(Error::invalid("staleness_steps must be >= 0"));
        }
        if !(self.dilation.is_finite() && self.dilation >= 1.0) {
            return Err(Error::invalid("dilation must be >= 1"));
        }
        for path in [&self.latency_model, &self.workload.trace]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "referenced file does not exist",
                    ),
                ));
            }
        }
        if self.workload.trace.is_none() {
            self.trace_spec().validate()?;
        }
        Ok(())
    }

    pub fn trace_spec(&self) -> TraceSpec {
        TraceSpec {
            rps: self.workload.rps,
            duration_s: self.workload.duration_s,
            mask_dist: self.workload.mask_dist.clone(),
            template_pool: self.workload.template_pool,
            zipf_s: self.workload.zipf_s,
            steps_total: self.steps_total,
            seed: self.seed,
        }
    }

    /// The configured model file, or a calibration of the simulated
    /// backend.
    pub fn latency_model(&self) -> Result<LatencyModel> {
        match &self.latency_model {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                LatencyModel::from_json(&text)
            }
            None => Ok(calibrate(&mut SimulatedBackend::default(), &default_sim_grid(), 3)?.model),
        }
    }

    /// Worker settings with pre/post durations resolved against `model`.
    pub fn worker_config(&self, model: &LatencyModel) -> Result<WorkerConfig> {
        let mut w = WorkerConfig {
            max_batch: self.max_batch,
            queue_bound: self.queue_bound,
            policy: self.batching,
            d_pre: Nanos::ZERO,
            d_post: Nanos::ZERO,
            pre_lanes: self.pre_lanes,
            post_lanes: self.post_lanes,
            n_blocks: self.n_blocks,
            tokens: self.tokens,
            hidden: self.hidden,
            planner: self.planner,
            tie: self.tie,
        };
        let tenth = Nanos(Worker::single_step_latency(&w, model, 1.0)?.0 / 10);
        w.d_pre = self.d_pre_ns.map_or(tenth, Nanos);
        w.d_post = self.d_post_ns.map_or(tenth, Nanos);
        Ok(w)
    }
}
