//! A serving worker: one denoise lane running a step-level batch, plus pre-
//! and post-processing lanes.
//!
//! The worker is an event-driven state machine over its own timeline. The
//! caller feeds it arrivals with [`Worker::submit`] and moves it forward with
//! [`Worker::advance_to`]; every state change happens at an event time, so a
//! run is reproducible bit for bit in virtual time.
//!
//! Policies differ only in where pre/post work runs and when requests may
//! join the running batch:
//!
//! * `Static`: separate pre/post lanes; joins only when the batch is empty.
//! * `NaiveContinuous`: joins at every step boundary, but pre/post work runs
//!   on the denoise lane and stalls every running member.
//! * `Disaggregated`: joins at every step boundary; pre/post work never
//!   touches the denoise lane.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::{ActivationCache, Blob, EntryKey};
use crate::error::{Error, Result};
use crate::latmodel::{cache_bytes, BatchItem, CacheVariant, LatencyModel};
use crate::planner::{
    costs_for_batch, execute_plan_live, plan_with_policy, BlockPlan, PlanCosts, PlannerPolicy,
    SleepWork, TieRule,
};
use crate::types::{MaskSpec, Nanos, Phase, RequestId, RequestRecord, TokenGrid};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub enum BatchingPolicy {
    #[serde(rename = "static")]
    Static,
    #[serde(rename = "naive")]
    NaiveContinuous,
    #[default]
    #[serde(rename = "continuous", alias = "disaggregated")]
    Disaggregated,
}

impl BatchingPolicy {
    pub fn name(self) -> &'static str {
        match self {
            BatchingPolicy::Static => "static",
            BatchingPolicy::NaiveContinuous => "naive",
            BatchingPolicy::Disaggregated => "continuous",
        }
    }

    fn joins_any_boundary(self) -> bool {
        !matches!(self, BatchingPolicy::Static)
    }
}

impl fmt::Display for BatchingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BatchingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(BatchingPolicy::Static),
            "naive" | "naive-continuous" => Ok(BatchingPolicy::NaiveContinuous),
            "continuous" | "disaggregated" => Ok(BatchingPolicy::Disaggregated),
            other => Err(Error::invalid(format!(
                "unknown batching policy {other:?} (static, naive, continuous)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub max_batch: usize,
    /// Requests accepted but not yet in the running batch.
    pub queue_bound: usize,
    pub policy: BatchingPolicy,
    pub d_pre: Nanos,
    pub d_post: Nanos,
    pub pre_lanes: usize,
    pub post_lanes: usize,
    pub n_blocks: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub planner: PlannerPolicy,
    pub tie: TieRule,
}

impl WorkerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_batch", self.max_batch),
            ("queue_bound", self.queue_bound),
            ("pre_lanes", self.pre_lanes),
            ("post_lanes", self.post_lanes),
            ("n_blocks", self.n_blocks),
            ("tokens", self.tokens),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Latent grid of a single request.
    pub fn request_grid(&self) -> TokenGrid {
        TokenGrid {
            batch: 1,
            tokens: self.tokens,
            hidden: self.hidden,
        }
    }
}

/// How step durations are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum StepTiming {
    /// The plan's predicted latency.
    #[default]
    Virtual,
    /// Run the plan on real lanes with sleeps shrunk by `dilation` and scale
    /// the measured makespan back up.
    Live { dilation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Submit,
    Join,
    Leave,
    StepStart,
    StepEnd,
    PreStart,
    PreEnd,
    PostStart,
    PostEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerEvent {
    pub ts_ns: Nanos,
    pub worker_id: usize,
    pub event: EventKind,
    pub request_id: Option<RequestId>,
    pub batch_size: usize,
}

/// What occupied the denoise lane during a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneUse {
    Step,
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneSpan {
    pub start: Nanos,
    pub end: Nanos,
    pub kind: LaneUse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub start: Nanos,
    pub end: Nanos,
    pub members: Vec<RequestId>,
    pub joined: Vec<RequestId>,
    pub left: Vec<RequestId>,
    pub cached_blocks: usize,
    /// The first plan wanted a block that was not resident.
    pub fallback: bool,
}

/// A request after post-processing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Completed {
    pub record: RequestRecord,
    pub worker_id: usize,
    /// Pre/post jobs of other requests that stalled this one's denoising.
    pub interruptions: u32,
    /// Ran without cached activations.
    pub cold: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WorkerStats {
    pub steps: u64,
    pub denoise_busy: Nanos,
    pub step_busy: Nanos,
    pub fallbacks: u64,
    pub cached_blocks: u64,
    /// Wall time spent assembling, planning and retiring each step.
    #[serde(skip)]
    pub bookkeeping: Vec<Duration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub request_id: RequestId,
    /// Ratio the step cost is computed with (1.0 without cached activations).
    pub mask_ratio: f64,
    pub remaining_steps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSnapshot {
    pub worker_id: usize,
    pub taken_at: Nanos,
    pub policy: BatchingPolicy,
    pub max_batch: usize,
    pub members: Vec<MemberSummary>,
    /// Accepted requests not yet running, in admission order.
    pub queued: Vec<MemberSummary>,
    pub queue_depth: usize,
}

impl WorkerSnapshot {
    pub fn slack(&self) -> usize {
        self.max_batch.saturating_sub(self.members.len())
    }

    pub fn load_count(&self) -> usize {
        self.members.len() + self.queue_depth
    }

    pub fn masked_tokens(&self, tokens: usize) -> f64 {
        self.members
            .iter()
            .chain(&self.queued)
            .map(|m| m.mask_ratio * tokens as f64)
            .sum()
    }

    /// Records a request routed here since the snapshot was taken.
    pub fn note_routed(&mut self, request_id: RequestId, mask_ratio: f64, steps: u32) {
        self.queued.push(MemberSummary {
            request_id,
            mask_ratio,
            remaining_steps: steps,
        });
        self.queue_depth += 1;
    }
}

#[derive(Debug)]
struct Member {
    rec: RequestRecord,
    m_eff: f64,
    cold: bool,
    interruptions: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    PreDone(RequestId),
    PostDone(RequestId),
    DenoiseDone,
    /// Decide the denoise lane's next job after all simultaneous events.
    Boundary,
}

#[derive(Debug)]
enum LaneJob {
    Step(StepReport),
    Pre(RequestId),
    Post(RequestId),
}

pub struct Worker {
    id: usize,
    cfg: WorkerConfig,
    model: Arc<LatencyModel>,
    cache: Option<ActivationCache>,
    timing: StepTiming,
    now: Nanos,
    members: BTreeMap<RequestId, Member>,
    queue: VecDeque<RequestId>,
    in_pre: Vec<RequestId>,
    ready: VecDeque<RequestId>,
    running: Vec<RequestId>,
    post_queue: VecDeque<RequestId>,
    post_busy: usize,
    denoise: Option<LaneJob>,
    boundary_pending: bool,
    events: BinaryHeap<Reverse<(Nanos, u64, Pending)>>,
    seq: u64,
    done: Vec<Completed>,
    log: Vec<WorkerEvent>,
    spans: Vec<LaneSpan>,
    stats: WorkerStats,
    last_step: Option<StepReport>,
}

impl fmt::Debug for Worker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Worker")
            .field("id", &self.id)
            .field("now", &self.now)
            .field("running", &self.running)
            .field("queue_depth", &self.queue_depth())
            .finish()
    }
}

impl Worker {
    pub fn new(id: usize, cfg: WorkerConfig, model: Arc<LatencyModel>) -> Result<Worker> {
        cfg.validate()?;
        model.comp()?;
        model.load()?;
        Ok(Worker {
            id,
            cfg,
            model,
            cache: None,
            timing: StepTiming::Virtual,
            now: Nanos::ZERO,
            members: BTreeMap::new(),
            queue: VecDeque::new(),
            in_pre: Vec::new(),
            ready: VecDeque::new(),
            running: Vec::new(),
            post_queue: VecDeque::new(),
            post_busy: 0,
            denoise: None,
            boundary_pending: false,
            events: BinaryHeap::new(),
            seq: 0,
            done: Vec::new(),
            log: Vec::new(),
            spans: Vec::new(),
            stats: WorkerStats::default(),
            last_step: None,
        })
    }

    /// Serve activations from `cache`. Without a cache every request runs
    /// with its own mask ratio as if its template were resident.
    pub fn with_cache(mut self, cache: ActivationCache) -> Worker {
        self.cache = Some(cache);
        self
    }

    pub fn with_timing(mut self, timing: StepTiming) -> Worker {
        self.timing = timing;
        self
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.cfg
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn queue_depth(&self) -> usize {
        self.queue.len() + self.in_pre.len() + self.ready.len()
    }

    pub fn running(&self) -> &[RequestId] {
        &self.running
    }

    pub fn stats(&self) -> &WorkerStats {
        &self.stats
    }

    pub fn event_log(&self) -> &[WorkerEvent] {
        &self.log
    }

    pub fn lane_spans(&self) -> &[LaneSpan] {
        &self.spans
    }

    pub fn completed(&self) -> &[Completed] {
        &self.done
    }

    pub fn take_completed(&mut self) -> Vec<Completed> {
        std::mem::take(&mut self.done)
    }

    /// Nothing accepted is still in flight.
    pub fn is_idle(&self) -> bool {
        self.members.is_empty() && self.events.is_empty()
    }

    pub fn next_event_time(&self) -> Option<Nanos> {
        self.events.peek().map(|Reverse((t, _, _))| *t)
    }

    pub fn write_event_log<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.log {
            serde_json::to_writer(&mut out, e).map_err(|e| Error::State(e.to_string()))?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("<event log>", e))?;
        }
        Ok(())
    }

    /// Step latency of one request alone with ratio `m`.
    pub fn single_step_latency(cfg: &WorkerConfig, model: &LatencyModel, m: f64) -> Result<Nanos> {
        let costs = costs_for_batch(&[(cfg.request_grid(), m)], model, cfg.n_blocks)?;
        Ok(plan_with_policy(&costs, cfg.planner, cfg.tie, &[]).pipeline_latency)
    }

    /// Accepts `req` at time `now`, after processing every strictly earlier
    /// event. Requests submitted at the same instant share a step boundary.
    pub fn submit(&mut self, mut req: RequestRecord, now: Nanos) -> Result<()> {
        self.advance_before(now)?;
        if self.members.contains_key(&req.id) {
            return Err(Error::State(format!("request {} submitted twice", req.id)));
        }
        if self.queue_depth() >= self.cfg.queue_bound {
            return Err(Error::Backpressure {
                worker: self.id,
                request: req.id,
            });
        }
        req.stamp(Phase::Enqueue, now)?;
        let cold = match &self.cache {
            Some(cache) => {
                // Promotion overlaps queuing; the simulated store has no
                // transfer time, a directory store pays it here.
                cache.promote_template(&req.template_id, 0..req.steps_total)?;
                !cache.has_template(&req.template_id)
            }
            None => false,
        };
        let m_eff = if cold { 1.0 } else { req.mask.ratio() };
        let id = req.id;
        self.members.insert(
            id,
            Member {
                rec: req,
                m_eff,
                cold,
                interruptions: 0,
            },
        );
        self.queue.push_back(id);
        self.emit(EventKind::Submit, Some(id));
        self.kick()
    }

    /// Processes every internal event up to and including `t`.
    pub fn advance_to(&mut self, t: Nanos) -> Result<()> {
        self.run_events(t, true)
    }

    /// Processes every internal event strictly before `t`.
    pub fn advance_before(&mut self, t: Nanos) -> Result<()> {
        self.run_events(t, false)
    }

    fn run_events(&mut self, t: Nanos, inclusive: bool) -> Result<()> {
        if t < self.now {
            return Err(Error::State(format!(
                "worker {} cannot move back from {} to {t}",
                self.id, self.now
            )));
        }
        while let Some(Reverse((at, _, _))) = self.events.peek() {
            if *at > t || (*at == t && !inclusive) {
                break;
            }
            let Reverse((at, _, ev)) = self.events.pop().expect("peeked");
            self.now = at;
            self.handle(ev)?;
        }
        self.now = t;
        Ok(())
    }

    /// Processes events in order until every accepted request is done.
    pub fn drain(&mut self) -> Result<()> {
        while let Some(t) = self.next_event_time() {
            self.advance_to(t)?;
        }
        Ok(())
    }

    /// Runs until the next denoising step completes and reports it.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.running.is_empty() && self.ready.is_empty() && self.queue_depth() == 0 {
            return Err(Error::State(format!(
                "worker {} has no batch to step",
                self.id
            )));
        }
        self.last_step = None;
        while self.last_step.is_none() {
            let Some(t) = self.next_event_time() else {
                return Err(Error::State(format!(
                    "worker {} stalled before a step",
                    self.id
                )));
            };
            // Handle one event at a time so the step returned is the next one.
            let Reverse((at, _, ev)) = self.events.pop().expect("peeked");
            debug_assert_eq!(at, t);
            self.now = at;
            self.handle(ev)?;
        }
        Ok(self.last_step.take().expect("loop exit"))
    }

    pub fn snapshot(&self) -> WorkerSnapshot {
        let summary = |id: &RequestId| {
            let m = &self.members[id];
            MemberSummary {
                request_id: *id,
                mask_ratio: m.m_eff,
                remaining_steps: m.rec.remaining_steps(),
            }
        };
        WorkerSnapshot {
            worker_id: self.id,
            taken_at: self.now,
            policy: self.cfg.policy,
            max_batch: self.cfg.max_batch,
            members: self.running.iter().map(summary).collect(),
            queued: self
                .ready
                .iter()
                .chain(&self.in_pre)
                .chain(&self.queue)
                .map(summary)
                .collect(),
            queue_depth: self.queue_depth(),
        }
    }

    fn schedule(&mut self, at: Nanos, ev: Pending) {
        self.seq += 1;
        self.events.push(Reverse((at, self.seq, ev)));
    }

    fn emit(&mut self, event: EventKind, request_id: Option<RequestId>) {
        self.log.push(WorkerEvent {
            ts_ns: self.now,
            worker_id: self.id,
            event,
            request_id,
            batch_size: self.running.len(),
        });
    }

    fn stamp(&mut self, id: RequestId, phase: Phase) -> Result<()> {
        let now = self.now;
        self.members
            .get_mut(&id)
            .expect("tracked request")
            .rec
            .stamp(phase, now)
    }

    fn handle(&mut self, ev: Pending) -> Result<()> {
        match ev {
            Pending::PreDone(id) => {
                self.in_pre.retain(|x| *x != id);
                self.finish_pre(id)?;
            }
            Pending::PostDone(id) => {
                self.post_busy -= 1;
                self.finish_post(id)?;
            }
            Pending::DenoiseDone => {
                let job = self.denoise.take().expect("denoise job in flight");
                match job {
                    LaneJob::Step(report) => self.finish_step(report)?,
                    LaneJob::Pre(id) => self.finish_pre(id)?,
                    LaneJob::Post(id) => self.finish_post(id)?,
                }
            }
            Pending::Boundary => {
                if self.next_event_time() == Some(self.now) {
                    // Let everything else at this instant land first.
                    self.schedule(self.now, Pending::Boundary);
                    return Ok(());
                }
                self.boundary_pending = false;
                if self.denoise.is_none() {
                    self.start_denoise_job()?;
                }
                // Only side lanes: an idle boundary must not re-arm itself.
                return self.kick_side_lanes();
            }
        }
        self.kick()
    }

    fn finish_pre(&mut self, id: RequestId) -> Result<()> {
        self.stamp(id, Phase::PreEnd)?;
        self.ready.push_back(id);
        self.emit(EventKind::PreEnd, Some(id));
        Ok(())
    }

    fn finish_post(&mut self, id: RequestId) -> Result<()> {
        self.stamp(id, Phase::Done)?;
        self.emit(EventKind::PostEnd, Some(id));
        let m = self.members.remove(&id).expect("tracked request");
        self.done.push(Completed {
            record: m.rec,
            worker_id: self.id,
            interruptions: m.interruptions,
            cold: m.cold,
        });
        Ok(())
    }

    /// Starts side-lane jobs whose lane is free and arms a step boundary
    /// for an idle denoise lane.
    fn kick(&mut self) -> Result<()> {
        self.kick_side_lanes()?;
        if self.denoise.is_none() && !self.boundary_pending {
            self.boundary_pending = true;
            self.schedule(self.now, Pending::Boundary);
        }
        Ok(())
    }

    fn kick_side_lanes(&mut self) -> Result<()> {
        let separate_lanes = self.cfg.policy != BatchingPolicy::NaiveContinuous;
        if separate_lanes {
            while self.in_pre.len() < self.cfg.pre_lanes {
                let Some(id) = self.queue.pop_front() else {
                    break;
                };
                self.stamp(id, Phase::PreStart)?;
                self.emit(EventKind::PreStart, Some(id));
                self.in_pre.push(id);
                self.schedule(self.now + self.cfg.d_pre, Pending::PreDone(id));
            }
            while self.post_busy < self.cfg.post_lanes {
                let Some(id) = self.post_queue.pop_front() else {
                    break;
                };
                self.emit(EventKind::PostStart, Some(id));
                self.post_busy += 1;
                self.schedule(self.now + self.cfg.d_post, Pending::PostDone(id));
            }
        }
        Ok(())
    }

    fn occupy_denoise(&mut self, job: LaneJob, kind: LaneUse, dur: Nanos) {
        self.spans.push(LaneSpan {
            start: self.now,
            end: self.now + dur,
            kind,
        });
        self.stats.denoise_busy += dur;
        self.denoise = Some(job);
        self.schedule(self.now + dur, Pending::DenoiseDone);
    }

    fn interrupt_running(&mut self) {
        for id in &self.running {
            self.members.get_mut(id).expect("tracked").interruptions += 1;
        }
    }

    fn start_denoise_job(&mut self) -> Result<()> {
        if self.cfg.policy == BatchingPolicy::NaiveContinuous {
            if let Some(id) = self.post_queue.pop_front() {
                self.emit(EventKind::PostStart, Some(id));
                self.interrupt_running();
                self.occupy_denoise(LaneJob::Post(id), LaneUse::Post, self.cfg.d_post);
                return Ok(());
            }
            if self.running.len() + self.ready.len() < self.cfg.max_batch {
                if let Some(id) = self.queue.pop_front() {
                    self.stamp(id, Phase::PreStart)?;
                    self.emit(EventKind::PreStart, Some(id));
                    self.interrupt_running();
                    self.occupy_denoise(LaneJob::Pre(id), LaneUse::Pre, self.cfg.d_pre);
                    return Ok(());
                }
            }
        }
        let t0 = Instant::now();
        let mut joined = Vec::new();
        if self.cfg.policy.joins_any_boundary() || self.running.is_empty() {
            while self.running.len() < self.cfg.max_batch {
                let Some(id) = self.ready.pop_front() else {
                    break;
                };
                self.stamp(id, Phase::DenoiseStart)?;
                self.running.push(id);
                self.emit(EventKind::Join, Some(id));
                joined.push(id);
            }
        }
        if self.running.is_empty() {
            return Ok(());
        }
        let (plan, costs, fallback) = self.plan_step()?;
        let dur = match self.timing {
            StepTiming::Virtual => plan.pipeline_latency,
            StepTiming::Live { dilation } => live_step(&plan, &costs, dilation)?,
        };
        self.stats.steps += 1;
        self.stats.step_busy += dur;
        self.stats.cached_blocks += plan.cached_blocks() as u64;
        if fallback {
            self.stats.fallbacks += 1;
        }
        self.emit(EventKind::StepStart, None);
        let report = StepReport {
            start: self.now,
            end: self.now + dur,
            members: self.running.clone(),
            joined,
            left: Vec::new(),
            cached_blocks: plan.cached_blocks(),
            fallback,
        };
        self.occupy_denoise(LaneJob::Step(report), LaneUse::Step, dur);
        self.stats.bookkeeping.push(t0.elapsed());
        Ok(())
    }

    fn batch_items(&self) -> Vec<BatchItem> {
        let grid = self.cfg.request_grid();
        self.running
            .iter()
            .map(|id| (grid, self.members[id].m_eff))
            .collect()
    }

    /// Plans the next step; re-plans with missing blocks forced to full
    /// compute when a planned cached block is not resident.
    fn plan_step(&self) -> Result<(BlockPlan, PlanCosts, bool)> {
        let costs = costs_for_batch(&self.batch_items(), &self.model, self.cfg.n_blocks)?;
        let plan = plan_with_policy(&costs, self.cfg.planner, self.cfg.tie, &[]);
        let Some(cache) = &self.cache else {
            return Ok((plan, costs, false));
        };
        if plan.cached_blocks() == 0 {
            return Ok((plan, costs, false));
        }
        let mut missing = vec![false; self.cfg.n_blocks];
        for id in &self.running {
            let m = &self.members[id];
            if m.cold {
                continue;
            }
            let resident = cache.resident_blocks(
                &m.rec.template_id,
                m.rec.steps_done,
                CacheVariant::Y,
                self.cfg.n_blocks,
            );
            for (miss, ok) in missing.iter_mut().zip(resident) {
                *miss |= !ok;
            }
        }
        let broken = plan
            .use_cache
            .iter()
            .zip(&missing)
            .any(|(cached, miss)| *cached && *miss);
        let plan = if broken {
            plan_with_policy(&costs, self.cfg.planner, self.cfg.tie, &missing)
        } else {
            plan
        };
        for id in &self.running {
            let m = &self.members[id];
            if !m.cold {
                cache.record_use(
                    &m.rec.template_id,
                    m.rec.steps_done,
                    CacheVariant::Y,
                    &plan.use_cache,
                );
            }
        }
        Ok((plan, costs, broken))
    }

    fn finish_step(&mut self, mut report: StepReport) -> Result<()> {
        let t0 = Instant::now();
        self.emit(EventKind::StepEnd, None);
        let mut still = Vec::with_capacity(self.running.len());
        for id in std::mem::take(&mut self.running) {
            let m = self.members.get_mut(&id).expect("tracked");
            m.rec.advance_step()?;
            if m.rec.is_finished() {
                report.left.push(id);
            } else {
                still.push(id);
            }
        }
        self.running = still;
        for &id in &report.left {
            self.stamp(id, Phase::DenoiseEnd)?;
            self.emit(EventKind::Leave, Some(id));
            self.post_queue.push_back(id);
            let m = &self.members[&id];
            if m.cold {
                let (tmpl, steps) = (m.rec.template_id.clone(), m.rec.steps_total);
                self.populate_template(&tmpl, steps)?;
            }
        }
        self.stats.bookkeeping.push(t0.elapsed());
        self.last_step = Some(report);
        Ok(())
    }

    /// Stores a freshly computed template's per-step, per-block activations.
    fn populate_template(&mut self, template_id: &str, steps: u32) -> Result<()> {
        let Some(cache) = &self.cache else {
            return Ok(());
        };
        if cache.has_template(template_id) {
            return Ok(());
        }
        let bytes = cache_bytes(self.cfg.request_grid(), 0.0, CacheVariant::Y);
        for step in 0..steps {
            for block in 0..self.cfg.n_blocks as u32 {
                let key = EntryKey::new(template_id, block, step, CacheVariant::Y);
                if let Err(e) = cache.put(key, Blob::zeroed(bytes)) {
                    log::warn!("worker {}: cannot cache {template_id}: {e}", self.id);
                    return Ok(());
                }
            }
        }
        Ok(())
    }
}

/// Stores every step/block entry of `template_id` with full-image rows.
pub fn prewarm_template(
    cache: &ActivationCache,
    cfg: &WorkerConfig,
    template_id: &str,
    steps: u32,
) -> Result<()> {
    let bytes = cache_bytes(cfg.request_grid(), 0.0, CacheVariant::Y);
    for step in 0..steps {
        for block in 0..cfg.n_blocks as u32 {
            cache.put(
                EntryKey::new(template_id, block, step, CacheVariant::Y),
                Blob::zeroed(bytes),
            )?;
        }
    }
    Ok(())
}

fn live_step(plan: &BlockPlan, costs: &PlanCosts, dilation: f64) -> Result<Nanos> {
    if !(dilation.is_finite() && dilation >= 1.0) {
        return Err(Error::invalid(format!(
            "dilation must be >= 1, got {dilation}"
        )));
    }
    let shrink = |n: Nanos| Nanos((n.0 as f64 / dilation).round() as u64);
    let work = SleepWork {
        costs: PlanCosts {
            c_with: shrink(costs.c_with),
            c_without: shrink(costs.c_without),
            l_load: shrink(costs.l_load),
            n_blocks: costs.n_blocks,
        },
    };
    let trace = execute_plan_live(plan, &work)?;
    Ok(Nanos((trace.makespan.0 as f64 * dilation).round() as u64))
}

/// Builds a request record with a ratio-only mask.
pub fn request(
    id: RequestId,
    template: &str,
    mask_ratio: f64,
    steps: u32,
    arrival: Nanos,
) -> Result<RequestRecord> {
    RequestRecord::new(
        id,
        template,
        MaskSpec::from_ratio(mask_ratio)?,
        steps,
        arrival,
    )
}
