//! Cluster routing: mask-aware cost scores and two load-count baselines.
//!
//! A mask-aware cost is the predicted time for a worker to drain its batch
//! and queue with the new request appended. The batch is unrolled step by
//! step: queued requests join in FIFO order when slots free up, members leave
//! when their own step budget runs out, and every step costs the planned
//! pipeline latency of the batch at that moment. Between membership changes
//! the per-step latency is constant, so the sum is taken per segment.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::latmodel::{cache_bytes, flops_block, CacheVariant, LatencyModel};
use crate::planner::{plan_with_policy, PlanCosts, PlannerPolicy, TieRule};
use crate::types::{Nanos, RequestId, RequestRecord, TokenGrid};
use crate::worker::{BatchingPolicy, MemberSummary, Worker, WorkerSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    #[default]
    MaskAware,
    RequestCount,
    TokenCount,
}

impl RoutingKind {
    pub fn name(self) -> &'static str {
        match self {
            RoutingKind::MaskAware => "mask_aware",
            RoutingKind::RequestCount => "request_count",
            RoutingKind::TokenCount => "token_count",
        }
    }
}

impl fmt::Display for RoutingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoutingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "mask_aware" => Ok(RoutingKind::MaskAware),
            "request_count" => Ok(RoutingKind::RequestCount),
            "token_count" => Ok(RoutingKind::TokenCount),
            _ => Err(Error::invalid(format!(
                "unknown routing policy {s:?} (mask-aware, request-count, token-count)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingPolicy {
    pub kind: RoutingKind,
    /// Workers whose queue depth has reached this are skipped while any
    /// other worker is below it.
    pub queue_bound: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostScore {
    pub worker_id: usize,
    pub predicted_latency: Nanos,
    pub batch_after: usize,
}

/// The request being routed, as the router sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestView {
    pub id: RequestId,
    /// Ratio the worker will compute with (1.0 for a cold template).
    pub mask_ratio: f64,
    pub steps: u32,
}

/// Per-member work of one block, precomputed so segment sums are cheap.
#[derive(Debug, Clone, Copy, Default)]
struct Work {
    flops_cached: u64,
    flops_full: u64,
    load_bytes: u64,
}

impl std::ops::AddAssign for Work {
    fn add_assign(&mut self, o: Work) {
        self.flops_cached += o.flops_cached;
        self.flops_full += o.flops_full;
        self.load_bytes += o.load_bytes;
    }
}

/// Prices hypothetical batches with a latency model and a planner.
#[derive(Debug, Clone)]
pub struct CostModel {
    model: Arc<LatencyModel>,
    grid: TokenGrid,
    n_blocks: usize,
    planner: PlannerPolicy,
    tie: TieRule,
    memo: HashMap<(u64, u64, u64), Nanos>,
}

const MEMO_LIMIT: usize = 1 << 16;

impl CostModel {
    /// `planner` should have a latency that never decreases when costs
    /// grow; [`PlannerPolicy::Optimal`] has that property, the greedy
    /// planner does not.
    pub fn new(
        model: Arc<LatencyModel>,
        tokens: usize,
        hidden: usize,
        n_blocks: usize,
        planner: PlannerPolicy,
        tie: TieRule,
    ) -> Result<CostModel> {
        Ok(CostModel {
            model,
            grid: TokenGrid::new(1, tokens, hidden)?,
            n_blocks,
            planner,
            tie,
            memo: HashMap::new(),
        })
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    fn work(&self, m: f64) -> Work {
        Work {
            flops_cached: flops_block(self.grid, m, true).total_flops,
            flops_full: flops_block(self.grid, m, false).total_flops,
            load_bytes: cache_bytes(self.grid, m, CacheVariant::Y),
        }
    }

    fn step_latency(&mut self, w: Work) -> Result<Nanos> {
        let key = (w.flops_cached, w.flops_full, w.load_bytes);
        if let Some(l) = self.memo.get(&key) {
            return Ok(*l);
        }
        let costs = PlanCosts::new(
            self.model.comp_latency(w.flops_cached)?,
            self.model.comp_latency(w.flops_full)?,
            self.model.load_latency(w.load_bytes)?,
            self.n_blocks,
        )?;
        let lat = plan_with_policy(&costs, self.planner, self.tie, &[]).pipeline_latency;
        if self.memo.len() >= MEMO_LIMIT {
            self.memo.clear();
        }
        self.memo.insert(key, lat);
        Ok(lat)
    }

    /// Predicted time to drain `snap`'s batch and queue plus `req`.
    pub fn calc_cost(&mut self, req: &RequestView, snap: &WorkerSnapshot) -> Result<CostScore> {
        if !self.model.is_fitted() {
            return Err(Error::State("latency model is not fitted".into()));
        }
        let entry = |s: &MemberSummary| (s.mask_ratio, s.remaining_steps);
        let mut running: Vec<(Work, u32)> = snap
            .members
            .iter()
            .map(entry)
            .filter(|(_, r)| *r > 0)
            .map(|(m, r)| (self.work(m), r))
            .collect();
        let mut waiting: VecDeque<(Work, u32)> = snap
            .queued
            .iter()
            .map(entry)
            .chain(std::iter::once((req.mask_ratio, req.steps)))
            .filter(|(_, r)| *r > 0)
            .map(|(m, r)| (self.work(m), r))
            .collect();
        let joins_any_boundary = snap.policy != BatchingPolicy::Static;
        let mut total = Nanos::ZERO;
        loop {
            if joins_any_boundary || running.is_empty() {
                while running.len() < snap.max_batch {
                    match waiting.pop_front() {
                        Some(w) => running.push(w),
                        None => break,
                    }
                }
            }
            if running.is_empty() {
                break;
            }
            let span = running.iter().map(|(_, r)| *r).min().expect("non-empty");
            let mut sum = Work::default();
            for (w, _) in &running {
                sum += *w;
            }
            total += self.step_latency(sum)? * u64::from(span);
            running.retain_mut(|(_, r)| {
                *r -= span;
                *r > 0
            });
        }
        Ok(CostScore {
            worker_id: snap.worker_id,
            predicted_latency: total,
            batch_after: (snap.members.len() + snap.queued.len() + 1).min(snap.max_batch),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerScore {
    pub worker: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub worker_id: usize,
    /// Candidate scores in worker-id order.
    pub scores: Vec<WorkerScore>,
}

impl RouteDecision {
    /// Candidates from best to worst, ties by worker id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut s = self.scores.clone();
        s.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.worker.cmp(&b.worker)));
        s.into_iter().map(|s| s.worker).collect()
    }
}

/// Picks the worker with the lowest score under `policy`.
pub fn route(
    req: &RequestView,
    workers: &[WorkerSnapshot],
    policy: &RoutingPolicy,
    costs: &mut CostModel,
) -> Result<RouteDecision> {
    if workers.is_empty() {
        return Err(Error::NoCapacity);
    }
    let open: Vec<&WorkerSnapshot> = workers
        .iter()
        .filter(|w| w.queue_depth < policy.queue_bound)
        .collect();
    let mut candidates = if open.is_empty() {
        workers.iter().collect()
    } else {
        open
    };
    candidates.sort_by_key(|w| w.worker_id);
    let mut scores = Vec::with_capacity(candidates.len());
    for w in candidates {
        let cost = match policy.kind {
            RoutingKind::MaskAware => costs.calc_cost(req, w)?.predicted_latency.0 as f64,
            RoutingKind::RequestCount => w.load_count() as f64,
            RoutingKind::TokenCount => w.masked_tokens(costs.grid.tokens),
        };
        scores.push(WorkerScore {
            worker: w.worker_id,
            cost,
        });
    }
    let best = scores
        .iter()
        .fold(None::<WorkerScore>, |best, s| match best {
            Some(b) if b.cost <= s.cost => Some(b),
            _ => Some(*s),
        })
        .expect("non-empty candidates");
    debug_assert!(scores.iter().all(|s| best.cost <= s.cost));
    Ok(RouteDecision {
        worker_id: best.worker,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub ts_ns: Nanos,
    pub request_id: RequestId,
    pub policy: RoutingKind,
    /// `None` when every candidate refused the request.
    pub chosen_worker: Option<usize>,
    pub scores: Vec<WorkerScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchOutcome {
    Placed(usize),
    Rejected,
}

/// Serial routing front end. Worker snapshots are pulled lazily and reused
/// until older than `staleness`; routed requests are added to the cached
/// snapshot in the meantime.
pub struct Dispatcher {
    policy: RoutingPolicy,
    costs: CostModel,
    staleness: Nanos,
    cache: Option<ActivationCache>,
    snapshots: Vec<Option<WorkerSnapshot>>,
    log: Vec<RoutingRecord>,
    decision_times: Vec<Duration>,
    rejected: Vec<RequestRecord>,
}

impl fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dispatcher")
            .field("policy", &self.policy)
            .field("staleness", &self.staleness)
            .field("routed", &self.log.len())
            .finish()
    }
}

impl Dispatcher {
    pub fn new(policy: RoutingPolicy, costs: CostModel, staleness: Nanos) -> Dispatcher {
        Dispatcher {
            policy,
            costs,
            staleness,
            cache: None,
            snapshots: Vec::new(),
            log: Vec::new(),
            decision_times: Vec::new(),
            rejected: Vec::new(),
        }
    }

    /// Lets the router see which templates are cold.
    pub fn with_cache(mut self, cache: ActivationCache) -> Dispatcher {
        self.cache = Some(cache);
        self
    }

    pub fn routing_log(&self) -> &[RoutingRecord] {
        &self.log
    }

    pub fn decision_times(&self) -> &[Duration] {
        &self.decision_times
    }

    pub fn rejected(&self) -> &[RequestRecord] {
        &self.rejected
    }

    pub fn write_routing_log<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.log {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::State(e.to_string()))?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("<routing log>", e))?;
        }
        Ok(())
    }

    fn view(&self, req: &RequestRecord) -> RequestView {
        let cold = self
            .cache
            .as_ref()
            .is_some_and(|c| !c.has_template(&req.template_id));
        RequestView {
            id: req.id,
            mask_ratio: if cold { 1.0 } else { req.mask.ratio() },
            steps: req.steps_total,
        }
    }

    fn refresh(&mut self, now: Nanos, workers: &mut [Worker]) -> Result<()> {
        self.snapshots.resize(workers.len(), None);
        for (slot, w) in self.snapshots.iter_mut().zip(workers.iter_mut()) {
            let stale = slot
                .as_ref()
                .is_none_or(|s| now.saturating_sub(s.taken_at) >= self.staleness);
            if stale {
                w.advance_before(now)?;
                *slot = Some(w.snapshot());
            }
        }
        Ok(())
    }

    /// Routes and submits one arrival. A worker refusing with backpressure
    /// is skipped for the next-best candidate.
    pub fn dispatch(
        &mut self,
        req: RequestRecord,
        now: Nanos,
        workers: &mut [Worker],
    ) -> Result<DispatchOutcome> {
        let t0 = Instant::now();
        self.refresh(now, workers)?;
        let view = self.view(&req);
        let snaps: Vec<WorkerSnapshot> = self.snapshots.iter().flatten().cloned().collect();
        let decision = route(&view, &snaps, &self.policy, &mut self.costs)?;
        self.decision_times.push(t0.elapsed());

        let mut ranking = decision.ranking();
        // Workers outside the candidate set are a last resort.
        for w in workers.iter() {
            if !ranking.contains(&w.id()) {
                ranking.push(w.id());
            }
        }
        let mut chosen = None;
        for id in ranking {
            let idx = workers
                .iter()
                .position(|w| w.id() == id)
                .ok_or_else(|| Error::State(format!("unknown worker {id}")))?;
            match workers[idx].submit(req.clone(), now) {
                Ok(()) => {
                    if let Some(s) = self.snapshots[idx].as_mut() {
                        s.note_routed(req.id, view.mask_ratio, view.steps);
                    }
                    chosen = Some(id);
                    break;
                }
                Err(Error::Backpressure { .. }) => {
                    // Its snapshot was optimistic; pull a fresh one next time.
                    self.snapshots[idx] = None;
                }
                Err(e) => return Err(e),
            }
        }
        self.log.push(RoutingRecord {
            ts_ns: now,
            request_id: req.id,
            policy: self.policy.kind,
            chosen_worker: chosen,
            scores: decision.scores,
        });
        Ok(match chosen {
            Some(id) => DispatchOutcome::Placed(id),
            None => {
                self.rejected.push(req);
                DispatchOutcome::Rejected
            }
        })
    }
}

/// Routes every request of `source` in arrival order. Arrivals must not go
/// back in time.
pub fn run_dispatch_loop<I>(
    source: I,
    workers: &mut [Worker],
    dispatcher: &mut Dispatcher,
) -> Result<Vec<(RequestId, DispatchOutcome)>>
where
    I: IntoIterator<Item = RequestRecord>,
{
    let mut out = Vec::new();
    let mut last = Nanos::ZERO;
    for req in source {
        if req.arrival < last {
            return Err(Error::invalid(format!(
                "request {} arrives at {} before the previous arrival {last}",
                req.id, req.arrival
            )));
        }
        last = req.arrival;
        let id = req.id;
        let at = req.arrival;
        out.push((id, dispatcher.dispatch(req, at, workers)?));
    }
    Ok(out)
}
