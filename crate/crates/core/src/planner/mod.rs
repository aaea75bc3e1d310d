//! Which transformer blocks should reuse cached activations.
//!
//! The timing model has two lanes. The load lane copies cached blocks in
//! block order, back to back from time zero. The compute lane runs blocks in
//! order; a cached block starts once both its load and the previous block
//! have finished and takes `c_with`, an uncached block takes `c_without`.

mod executor;

pub use executor::{
    compute_gaps, execute_plan, execute_plan_live, Action, ExecMode, Lane, LaneEvent, LaneWork,
    ScheduleTrace, SleepWork,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latmodel::{BatchItem, LatencyModel};
use crate::types::Nanos;

/// Largest block count the exhaustive planner accepts.
pub const EXACT_MAX_BLOCKS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCosts {
    /// Block latency with cached activations.
    pub c_with: Nanos,
    /// Block latency computing every token.
    pub c_without: Nanos,
    /// Latency of loading one block's cached activations.
    pub l_load: Nanos,
    pub n_blocks: usize,
}

impl PlanCosts {
    pub fn new(
        c_with: Nanos,
        c_without: Nanos,
        l_load: Nanos,
        n_blocks: usize,
    ) -> Result<PlanCosts> {
        if n_blocks == 0 {
            return Err(Error::invalid("plan needs at least one block"));
        }
        Ok(PlanCosts {
            c_with,
            c_without,
            l_load,
            n_blocks,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub use_cache: Vec<bool>,
    pub pipeline_latency: Nanos,
    /// `comp[0..=N]`, `comp[0] = 0`.
    pub comp_finish: Vec<Nanos>,
    /// `load[0..=N]`, `load[0] = 0`.
    pub load_finish: Vec<Nanos>,
}

impl BlockPlan {
    pub fn cached_blocks(&self) -> usize {
        self.use_cache.iter().filter(|c| **c).count()
    }
}

/// Tie rule for the greedy comparison. `PreferCache` is the original `<=`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    PreferCache,
    #[default]
    PreferCompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerPolicy {
    #[default]
    Greedy,
    /// Exhaustive search up to [`EXACT_MAX_BLOCKS`], greedy above.
    ExactSmall,
    /// Polynomial exact search; any block count.
    Optimal,
}

/// Timeline of an arbitrary cache-use vector.
pub fn evaluate_plan(use_cache: &[bool], costs: &PlanCosts) -> BlockPlan {
    let n = use_cache.len();
    let mut comp = vec![Nanos::ZERO; n + 1];
    let mut load = vec![Nanos::ZERO; n + 1];
    for (i, &cached) in use_cache.iter().enumerate() {
        if cached {
            load[i + 1] = load[i] + costs.l_load;
            comp[i + 1] = load[i + 1].max(comp[i]) + costs.c_with;
        } else {
            load[i + 1] = load[i];
            comp[i + 1] = comp[i] + costs.c_without;
        }
    }
    BlockPlan {
        use_cache: use_cache.to_vec(),
        pipeline_latency: comp[n],
        comp_finish: comp,
        load_finish: load,
    }
}

/// Per-block greedy choice: cache a block when doing so finishes it no later
/// (or, with `PreferCompute`, strictly earlier) than computing it in full.
pub fn plan_greedy(costs: &PlanCosts, tie: TieRule) -> BlockPlan {
    plan_greedy_forced(costs, tie, &[])
}

/// Greedy plan where `forced_compute[i] == true` rules out caching block `i`.
pub fn plan_greedy_forced(costs: &PlanCosts, tie: TieRule, forced_compute: &[bool]) -> BlockPlan {
    let n = costs.n_blocks;
    let mut comp = vec![Nanos::ZERO; n + 1];
    let mut load = vec![Nanos::ZERO; n + 1];
    let mut use_cache = vec![false; n];
    for i in 1..=n {
        let with_cache = (load[i - 1] + costs.l_load).max(comp[i - 1]) + costs.c_with;
        let without = comp[i - 1] + costs.c_without;
        let take = match tie {
            TieRule::PreferCache => with_cache <= without,
            TieRule::PreferCompute => with_cache < without,
        };
        if take && !forced_compute.get(i - 1).copied().unwrap_or(false) {
            load[i] = load[i - 1] + costs.l_load;
            comp[i] = with_cache;
            use_cache[i - 1] = true;
        } else {
            load[i] = load[i - 1];
            comp[i] = without;
            use_cache[i - 1] = false;
        }
    }
    BlockPlan {
        use_cache,
        pipeline_latency: comp[n],
        comp_finish: comp,
        load_finish: load,
    }
}

/// Minimum-latency plan by exhaustive search over all `2^N` vectors. Ties go
/// to fewer cached blocks, then to the lexicographically smallest vector
/// (`false < true`).
pub fn plan_exact(costs: &PlanCosts) -> Result<BlockPlan> {
    plan_exact_forced(costs, &[])
}

pub fn plan_exact_forced(costs: &PlanCosts, forced_compute: &[bool]) -> Result<BlockPlan> {
    if costs.n_blocks > EXACT_MAX_BLOCKS {
        return Err(Error::TooLarge(format!(
            "{} blocks exceeds the exhaustive limit of {EXACT_MAX_BLOCKS}",
            costs.n_blocks
        )));
    }
    struct Search<'a> {
        costs: &'a PlanCosts,
        forced: &'a [bool],
        current: Vec<bool>,
        best: Option<(Nanos, usize, Vec<bool>)>,
    }
    impl Search<'_> {
        // Depth-first with `false` before `true` visits complete vectors in
        // lexicographic order, so only strict improvements replace `best`.
        fn go(&mut self, i: usize, comp: Nanos, load: Nanos, cached: usize) {
            if i == self.costs.n_blocks {
                let better = match &self.best {
                    None => true,
                    Some((lat, cnt, _)) => (comp, cached) < (*lat, *cnt),
                };
                if better {
                    self.best = Some((comp, cached, self.current.clone()));
                }
                return;
            }
            self.current.push(false);
            self.go(i + 1, comp + self.costs.c_without, load, cached);
            self.current.pop();
            if !self.forced.get(i).copied().unwrap_or(false) {
                let l = load + self.costs.l_load;
                self.current.push(true);
                self.go(i + 1, l.max(comp) + self.costs.c_with, l, cached + 1);
                self.current.pop();
            }
        }
    }
    let mut s = Search {
        costs,
        forced: forced_compute,
        current: Vec::with_capacity(costs.n_blocks),
        best: None,
    };
    s.go(0, Nanos::ZERO, Nanos::ZERO, 0);
    let (_, _, v) = s.best.expect("at least the all-compute plan exists");
    Ok(evaluate_plan(&v, costs))
}

/// Minimum-latency plan for any block count.
///
/// Loads run back to back, so after `i` blocks with `k` of them cached the
/// load lane ends at `k * l_load` regardless of which blocks were chosen.
/// For a fixed `(i, k)` the earliest compute finish therefore dominates, and
/// keeping only that value per state is exact. Ties prefer fewer cached
/// blocks.
pub fn plan_optimal(costs: &PlanCosts, forced_compute: &[bool]) -> BlockPlan {
    let n = costs.n_blocks;
    // best[i][k]: earliest compute finish after i blocks, k cached.
    let mut best = vec![vec![None::<Nanos>; n + 1]; n + 1];
    // took_cache[i][k]: block i-1 was cached on the best path into (i, k).
    let mut took_cache = vec![vec![false; n + 1]; n + 1];
    best[0][0] = Some(Nanos::ZERO);
    for i in 0..n {
        let forced = forced_compute.get(i).copied().unwrap_or(false);
        for k in 0..=i {
            let Some(c) = best[i][k] else { continue };
            let full = c + costs.c_without;
            if best[i + 1][k].is_none_or(|b| full < b) {
                best[i + 1][k] = Some(full);
                took_cache[i + 1][k] = false;
            }
            if !forced {
                let load_end = costs.l_load * (k as u64 + 1);
                let with = load_end.max(c) + costs.c_with;
                if best[i + 1][k + 1].is_none_or(|b| with < b) {
                    best[i + 1][k + 1] = Some(with);
                    took_cache[i + 1][k + 1] = true;
                }
            }
        }
    }
    let (mut k, _) = best[n]
        .iter()
        .enumerate()
        .filter_map(|(k, c)| c.map(|c| (k, c)))
        .min_by_key(|&(k, c)| (c, k))
        .expect("the all-compute path always exists");
    let mut use_cache = vec![false; n];
    for i in (1..=n).rev() {
        if took_cache[i][k] {
            use_cache[i - 1] = true;
            k -= 1;
        }
    }
    evaluate_plan(&use_cache, costs)
}

/// Per-block costs of a batch from the latency model.
pub fn costs_for_batch(
    batch: &[BatchItem],
    model: &LatencyModel,
    n_blocks: usize,
) -> Result<PlanCosts> {
    PlanCosts::new(
        model.predict_comp(batch, true)?,
        model.predict_comp(batch, false)?,
        model.predict_load(batch)?,
        n_blocks,
    )
}

pub fn plan_with_policy(
    costs: &PlanCosts,
    policy: PlannerPolicy,
    tie: TieRule,
    forced_compute: &[bool],
) -> BlockPlan {
    match policy {
        PlannerPolicy::Greedy => plan_greedy_forced(costs, tie, forced_compute),
        PlannerPolicy::ExactSmall => plan_exact_forced(costs, forced_compute)
            .unwrap_or_else(|_| plan_greedy_forced(costs, tie, forced_compute)),
        PlannerPolicy::Optimal => plan_optimal(costs, forced_compute),
    }
}

/// Plans one denoising step of a batch. `ExactSmall` falls back to greedy
/// above the exhaustive limit.
pub fn plan_for_batch(
    batch: &[BatchItem],
    model: &LatencyModel,
    n_blocks: usize,
    policy: PlannerPolicy,
    tie: TieRule,
) -> Result<BlockPlan> {
    let costs = costs_for_batch(batch, model, n_blocks)?;
    Ok(plan_with_policy(&costs, policy, tie, &[]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn costs(cw: u64, cwo: u64, l: u64, n: usize) -> PlanCosts {
        PlanCosts::new(Nanos(cw), Nanos(cwo), Nanos(l), n).unwrap()
    }

    fn ns(v: &[u64]) -> Vec<Nanos> {
        v.iter().map(|x| Nanos(*x)).collect()
    }

    #[test]
    fn free_loading_caches_everything() {
        let c = costs(2, 5, 0, 6);
        let g = plan_greedy(&c, TieRule::PreferCache);
        assert!(g.use_cache.iter().all(|x| *x));
        assert_eq!(g.pipeline_latency, Nanos(12));
        let e = plan_exact(&c).unwrap();
        assert_eq!(e.pipeline_latency, Nanos(12));
        assert!(e.use_cache.iter().all(|x| *x));
    }

    #[test]
    fn expensive_cached_compute_never_caches() {
        let c = costs(4, 3, 1, 5);
        for tie in [TieRule::PreferCache, TieRule::PreferCompute] {
            let g = plan_greedy(&c, tie);
            assert!(g.use_cache.iter().all(|x| !*x));
            assert_eq!(g.pipeline_latency, Nanos(15));
        }
        // Equal costs: caching can tie once loading hides behind compute,
        // but the latency is N * C_w/o either way.
        let c = costs(3, 3, 1, 5);
        for tie in [TieRule::PreferCache, TieRule::PreferCompute] {
            assert_eq!(plan_greedy(&c, tie).pipeline_latency, Nanos(15));
        }
        assert!(plan_greedy(&c, TieRule::PreferCompute)
            .use_cache
            .iter()
            .all(|x| !*x));
    }

    #[test]
    fn hand_traced_recurrence() {
        let c = costs(1, 3, 2, 4);
        let g = plan_greedy(&c, TieRule::PreferCache);
        assert_eq!(g.use_cache, vec![true; 4]);
        assert_eq!(g.comp_finish, ns(&[0, 3, 5, 7, 9]));
        assert_eq!(g.load_finish, ns(&[0, 2, 4, 6, 8]));
        assert_eq!(g.pipeline_latency, Nanos(9));

        let s = plan_greedy(&c, TieRule::PreferCompute);
        assert_eq!(s.use_cache, vec![false, true, true, true]);
        assert_eq!(s.comp_finish, ns(&[0, 3, 4, 5, 7]));
        assert_eq!(s.pipeline_latency, Nanos(7));

        let e = plan_exact(&c).unwrap();
        assert_eq!(e.use_cache, vec![false, true, true, true]);
        assert_eq!(e.pipeline_latency, Nanos(7));
    }

    #[test]
    fn exact_rejects_large_models() {
        assert!(matches!(
            plan_exact(&costs(1, 2, 1, 25)),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn exact_tie_prefers_fewer_cached_blocks() {
        // Caching or computing block 1 both finish at 4.
        let c = costs(2, 4, 2, 1);
        let e = plan_exact(&c).unwrap();
        assert_eq!(e.use_cache, vec![false]);
        let g = plan_greedy(&c, TieRule::PreferCache);
        assert_eq!(g.use_cache, vec![true]);
    }

    #[test]
    fn forced_blocks_are_computed() {
        let c = costs(1, 3, 0, 4);
        let forced = [false, true, false, false];
        let g = plan_greedy_forced(&c, TieRule::PreferCache, &forced);
        assert_eq!(g.use_cache, vec![true, false, true, true]);
        let e = plan_exact_forced(&c, &forced).unwrap();
        assert!(!e.use_cache[1]);
        assert_eq!(e.pipeline_latency, Nanos(6));
    }

    #[test]
    fn zero_blocks_rejected() {
        assert!(PlanCosts::new(Nanos(1), Nanos(1), Nanos(1), 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn plan_invariants(cw in 0u64..50, cwo in 0u64..50, l in 0u64..50, n in 1usize..10) {
            let c = costs(cw, cwo, l, n);
            for plan in [
                plan_greedy(&c, TieRule::PreferCache),
                plan_greedy(&c, TieRule::PreferCompute),
                plan_exact(&c).unwrap(),
            ] {
                proptest::prop_assert!(plan.comp_finish.windows(2).all(|w| w[0] <= w[1]));
                proptest::prop_assert!(plan.load_finish.windows(2).all(|w| w[0] <= w[1]));
                proptest::prop_assert_eq!(plan.pipeline_latency, plan.comp_finish[n]);
                proptest::prop_assert_eq!(&evaluate_plan(&plan.use_cache, &c), &plan);
            }
        }

        #[test]
        fn optimal_matches_exhaustive(cw in 0u64..50, cwo in 0u64..50, l in 0u64..50, n in 1usize..11) {
            let c = costs(cw, cwo, l, n);
            let opt = plan_optimal(&c, &[]);
            let exact = plan_exact(&c).unwrap();
            proptest::prop_assert_eq!(opt.pipeline_latency, exact.pipeline_latency);
            proptest::prop_assert_eq!(opt.cached_blocks(), exact.cached_blocks());
            proptest::prop_assert!(opt.pipeline_latency <= plan_greedy(&c, TieRule::PreferCache).pipeline_latency);
        }

        #[test]
        fn optimal_latency_grows_with_costs(
            cw in 0u64..50, cwo in 0u64..50, l in 0u64..50,
            dw in 0u64..10, dwo in 0u64..10, dl in 0u64..10, n in 1usize..30,
        ) {
            let a = plan_optimal(&costs(cw, cwo, l, n), &[]).pipeline_latency;
            let b = plan_optimal(&costs(cw + dw, cwo + dwo, l + dl, n), &[]).pipeline_latency;
            proptest::prop_assert!(a <= b);
        }
    }

    #[test]
    fn optimal_respects_forced_blocks() {
        let c = costs(1, 3, 2, 4);
        let p = plan_optimal(&c, &[false, true, false, false]);
        assert!(!p.use_cache[1]);
        assert_eq!(plan_optimal(&c, &[]).pipeline_latency, Nanos(7));
    }
}
