//! Realising a plan on a load lane and a compute lane.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{BlockPlan, PlanCosts};
use crate::error::{Error, Result};
use crate::types::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Load,
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Load,
    ComputeCached,
    ComputeFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LaneEvent {
    pub lane: Lane,
    pub block: usize,
    pub action: Action,
    pub start: Nanos,
    pub end: Nanos,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScheduleTrace {
    pub events: Vec<LaneEvent>,
    pub makespan: Nanos,
}

impl ScheduleTrace {
    fn finish(mut events: Vec<LaneEvent>) -> ScheduleTrace {
        events.sort_by_key(|e| (e.start, e.lane, e.block));
        let makespan = events
            .iter()
            .filter(|e| e.lane == Lane::Compute)
            .map(|e| e.end)
            .max()
            .unwrap_or(Nanos::ZERO);
        ScheduleTrace { events, makespan }
    }

    pub fn lane(&self, lane: Lane) -> impl Iterator<Item = &LaneEvent> {
        self.events.iter().filter(move |e| e.lane == lane)
    }

    /// `lane,block_index,action,start_ns,end_ns`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            lane: Lane,
            block_index: usize,
            action: Action,
            start_ns: u64,
            end_ns: u64,
        }
        let mut w = csv::Writer::from_writer(out);
        for e in &self.events {
            w.serialize(Row {
                lane: e.lane,
                block_index: e.block,
                action: e.action,
                start_ns: e.start.0,
                end_ns: e.end.0,
            })
            .map_err(|e| Error::invalid(format!("csv write: {e}")))?;
        }
        w.flush()
            .map_err(|e| Error::invalid(format!("csv flush: {e}")))?;
        Ok(())
    }
}

/// Idle time on the compute lane before each block after the first.
pub fn compute_gaps(trace: &ScheduleTrace) -> Vec<Nanos> {
    let mut compute: Vec<&LaneEvent> = trace.lane(Lane::Compute).collect();
    compute.sort_by_key(|e| e.block);
    compute
        .windows(2)
        .map(|w| w[1].start.saturating_sub(w[0].end))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Loads run ahead on their own lane.
    #[default]
    Pipelined,
    /// Each block's load starts only after the previous block's compute:
    /// load, compute, load, compute.
    Sequential,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    LoadDone(usize),
    ComputeDone(usize),
}

/// Discrete-event run of `plan` in virtual time. `available(i)` is checked
/// when the load of block `i` would start.
pub fn execute_plan<F>(
    plan: &BlockPlan,
    costs: &PlanCosts,
    mode: ExecMode,
    available: F,
) -> Result<ScheduleTrace>
where
    F: Fn(usize) -> bool,
{
    let n = plan.use_cache.len();
    if n != costs.n_blocks {
        return Err(Error::invalid(format!(
            "plan has {n} blocks, costs describe {}",
            costs.n_blocks
        )));
    }
    let loads: Vec<usize> = (0..n).filter(|&i| plan.use_cache[i]).collect();
    let mut ready = vec![false; n];
    let mut events = Vec::with_capacity(n + loads.len());
    let mut heap: BinaryHeap<Reverse<(Nanos, Ev)>> = BinaryHeap::new();

    let mut next_load = 0usize;
    let mut load_busy = false;
    let mut next_compute = 0usize;
    let mut compute_busy = false;
    let mut now = Nanos::ZERO;

    loop {
        // Start whatever can start at `now`.
        let load_allowed = match mode {
            ExecMode::Pipelined => true,
            ExecMode::Sequential => {
                !compute_busy && loads.get(next_load).is_some_and(|&b| b == next_compute)
            }
        };
        if !load_busy && load_allowed && next_load < loads.len() {
            let b = loads[next_load];
            if !available(b) {
                return Err(Error::CacheMiss(format!(
                    "block {b} not available at load start"
                )));
            }
            let end = now + costs.l_load;
            events.push(LaneEvent {
                lane: Lane::Load,
                block: b,
                action: Action::Load,
                start: now,
                end,
            });
            heap.push(Reverse((end, Ev::LoadDone(b))));
            load_busy = true;
            next_load += 1;
        }
        if !compute_busy && next_compute < n {
            let b = next_compute;
            let cached = plan.use_cache[b];
            if !cached || ready[b] {
                let (dur, action) = if cached {
                    (costs.c_with, Action::ComputeCached)
                } else {
                    (costs.c_without, Action::ComputeFull)
                };
                let end = now + dur;
                events.push(LaneEvent {
                    lane: Lane::Compute,
                    block: b,
                    action,
                    start: now,
                    end,
                });
                heap.push(Reverse((end, Ev::ComputeDone(b))));
                compute_busy = true;
                next_compute += 1;
                continue;
            }
        }
        let Some(Reverse((t, ev))) = heap.pop() else {
            break;
        };
        now = t;
        match ev {
            Ev::LoadDone(b) => {
                ready[b] = true;
                load_busy = false;
            }
            Ev::ComputeDone(_) => compute_busy = false,
        }
    }
    if next_compute != n {
        return Err(Error::State(
            "executor stalled before finishing the plan".into(),
        ));
    }
    Ok(ScheduleTrace::finish(events))
}

/// Work performed by the live executor's lanes.
pub trait LaneWork: Sync {
    fn load(&self, block: usize) -> Result<()>;
    fn compute(&self, block: usize, cached: bool) -> Result<()>;
}

/// Lane work that sleeps for the planned durations.
#[derive(Debug, Clone, Copy)]
pub struct SleepWork {
    pub costs: PlanCosts,
}

impl LaneWork for SleepWork {
    fn load(&self, _block: usize) -> Result<()> {
        std::thread::sleep(Duration::from_nanos(self.costs.l_load.0));
        Ok(())
    }

    fn compute(&self, _block: usize, cached: bool) -> Result<()> {
        let d = if cached {
            self.costs.c_with
        } else {
            self.costs.c_without
        };
        std::thread::sleep(Duration::from_nanos(d.0));
        Ok(())
    }
}

/// Runs `plan` on two OS threads in wall time. The load thread walks the
/// cached blocks in order and signals each completion; the compute lane
/// waits only on the blocks it is about to run.
pub fn execute_plan_live<W: LaneWork>(plan: &BlockPlan, work: &W) -> Result<ScheduleTrace> {
    let origin = Instant::now();
    let stamp = |t: Instant| Nanos::from(t.duration_since(origin));
    let loads: Vec<usize> = (0..plan.use_cache.len())
        .filter(|&i| plan.use_cache[i])
        .collect();
    let (tx, rx) = mpsc::channel::<Result<LaneEvent>>();

    std::thread::scope(|scope| {
        let loader = scope.spawn(move || {
            for &b in &loads {
                let start = Instant::now();
                let outcome = work.load(b).map(|()| LaneEvent {
                    lane: Lane::Load,
                    block: b,
                    action: Action::Load,
                    start: stamp(start),
                    end: stamp(Instant::now()),
                });
                let failed = outcome.is_err();
                if tx.send(outcome).is_err() || failed {
                    return;
                }
            }
        });

        let mut events = Vec::new();
        for (b, &cached) in plan.use_cache.iter().enumerate() {
            if cached {
                let ev = rx
                    .recv()
                    .map_err(|_| Error::State("load lane stopped early".into()))??;
                debug_assert_eq!(ev.block, b);
                events.push(ev);
            }
            let start = Instant::now();
            work.compute(b, cached)?;
            events.push(LaneEvent {
                lane: Lane::Compute,
                block: b,
                action: if cached {
                    Action::ComputeCached
                } else {
                    Action::ComputeFull
                },
                start: stamp(start),
                end: stamp(Instant::now()),
            });
        }
        loader
            .join()
            .map_err(|_| Error::State("load lane panicked".into()))?;
        Ok(ScheduleTrace::finish(events))
    })
}
