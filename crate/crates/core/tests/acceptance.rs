#[path = "common/lru_ref.rs"]
mod lru_ref;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use maskserve_core::cache::{blob_digest, ActivationCache, Blob, EntryKey, Storage};
use maskserve_core::config::RunConfig;
use maskserve_core::kernel::check::{default_grid, run_grid};
use maskserve_core::kernel::{cached_bytes, Tensor3};
use maskserve_core::latmodel::{
    calibrate, default_live_grid, fit, flops_block, CacheVariant, LiveKernelRunner,
};
use maskserve_core::planner::{
    evaluate_plan, execute_plan, execute_plan_live, plan_exact, plan_greedy, ExecMode, PlanCosts,
    SleepWork, TieRule,
};
use maskserve_core::scheduler::{route, CostModel, RequestView, RoutingKind, RoutingPolicy};
use maskserve_core::worker::{request, BatchingPolicy, MemberSummary, Worker, WorkerSnapshot};
use maskserve_core::workload::{capacity_rps, run, RunReport};
use maskserve_core::Nanos;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn costs(cw: u64, cwo: u64, l: u64, n: usize) -> PlanCosts {
    PlanCosts::new(Nanos(cw), Nanos(cwo), Nanos(l), n).expect("valid costs")
}

fn kernel_equivalence() -> Outcome {
    let cases = default_grid(0);
    ensure(cases.len() >= 200, || format!("only {} cases", cases.len()))?;
    for c in &cases {
        let g = c.grid;
        ensure(g.batch <= 2 && g.tokens <= 64 && g.hidden <= 32, || {
            format!("case out of range: {g:?}")
        })?;
    }
    let t0 = Instant::now();
    let report = run_grid(&cases, false).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(report.max_rel_err_y <= 1e-5, || {
        format!("Y-cache error {:.3e}", report.max_rel_err_y)
    })?;
    ensure(report.max_rel_err_kv <= 1e-5, || {
        format!("K/V-cache error {:.3e}", report.max_rel_err_kv)
    })?;
    ensure(report.unmasked_rows_exact, || {
        "unmasked rows differ from the cache".into()
    })?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} cases, max rel err y {:.2e} kv {:.2e}, {secs:.2} s",
        report.cases, report.max_rel_err_y, report.max_rel_err_kv
    ))
}

fn flop_arithmetic() -> Outcome {
    let mut checked = 0;
    for c in default_grid(0) {
        let g = c.grid;
        let k = c.mask.masked_tokens(g.tokens) as u64;
        let l = g.tokens as u64;
        let m = k as f64 / l as f64;
        let cached = flops_block(g, m, true);
        let full = flops_block(g, m, false);
        let rows = [
            ("ff", cached.ff_flops, full.ff_flops),
            ("q_proj", cached.q_proj_flops, full.q_proj_flops),
            ("out_proj", cached.out_proj_flops, full.out_proj_flops),
            ("scores", cached.score_flops, full.score_flops),
            ("av", cached.av_flops, full.av_flops),
        ];
        for (name, a, b) in rows {
            ensure(a * l == b * k, || {
                format!("{name} ratio {a}/{b} != {k}/{l} for {g:?}")
            })?;
        }
        let want_elems = g.batch as u64 * (l - k) * g.hidden as u64;
        ensure(cached.cache_elems == want_elems, || {
            format!(
                "cache elems {} != {want_elems} for {g:?}",
                cached.cache_elems
            )
        })?;
        let x = Tensor3::zeros(g);
        let y = cached_bytes(&x, &c.mask, false) as u64;
        let kv = cached_bytes(&x, &c.mask, true) as u64;
        ensure(y == want_elems * 4, || {
            format!("kernel Y cache {y} bytes for {g:?}")
        })?;
        ensure(kv == 2 * y, || {
            format!("kernel K/V cache {kv} bytes, Y {y}")
        })?;
        checked += 1;
    }
    Ok(format!(
        "{checked} grids: per-row ratio == m, elems == B(1-m)LH, K/V == 2x"
    ))
}

fn greedy_recurrence() -> Outcome {
    // (N, C_w, C_w/o, L, latency, plan) traced by hand with the <= tie rule.
    let traced: [(usize, u64, u64, u64, u64, &str); 6] = [
        (4, 1, 3, 2, 9, "CCCC"),
        (3, 2, 5, 1, 7, "CCC"),
        (4, 1, 2, 4, 7, "--C-"),
        (5, 2, 4, 3, 14, "-CCCC"),
        (2, 1, 2, 1, 3, "CC"),
        (6, 2, 5, 0, 12, "CCCCCC"),
    ];
    for (n, cw, cwo, l, latency, plan) in traced {
        let p = plan_greedy(&costs(cw, cwo, l, n), TieRule::PreferCache);
        let got: String = p
            .use_cache
            .iter()
            .map(|c| if *c { 'C' } else { '-' })
            .collect();
        ensure(p.pipeline_latency == Nanos(latency) && got == plan, || {
            format!(
                "({n},{cw},{cwo},{l}): got {} {got}, want {latency} {plan}",
                p.pipeline_latency.0
            )
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let n = rng.random_range(1..=16);
        let cw = rng.random_range(1..20);
        let cwo = rng.random_range(1..20);
        let zero_load = plan_greedy(&costs(cw, cwo, 0, n), TieRule::PreferCache);
        ensure(
            zero_load.pipeline_latency == Nanos(n as u64 * cw.min(cwo)),
            || {
                format!(
                    "L=0 with ({n},{cw},{cwo}) gave {}",
                    zero_load.pipeline_latency.0
                )
            },
        )?;
        let l = rng.random_range(0..20);
        let slow_cache = plan_greedy(&costs(cwo + cw, cwo, l, n), TieRule::PreferCache);
        ensure(slow_cache.pipeline_latency == Nanos(n as u64 * cwo), || {
            format!(
                "C_w>=C_w/o with ({n},{cwo},{l}) gave {}",
                slow_cache.pipeline_latency.0
            )
        })?;
    }
    Ok("6 traced instances; L=0 -> N*C_w and C_w>=C_w/o -> N*C_w/o on 500 draws".into())
}

fn exact_dominates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trials = 10_000;
    let mut strict = 0;
    for _ in 0..trials {
        let n = rng.random_range(1..=12);
        let c = costs(
            rng.random_range(0..50),
            rng.random_range(0..50),
            rng.random_range(0..50),
            n,
        );
        let exact = plan_exact(&c).map_err(|e| e.to_string())?;
        for tie in [TieRule::PreferCache, TieRule::PreferCompute] {
            let greedy = plan_greedy(&c, tie);
            ensure(exact.pipeline_latency <= greedy.pipeline_latency, || {
                format!(
                    "exact {} > greedy {} for {c:?}",
                    exact.pipeline_latency.0, greedy.pipeline_latency.0
                )
            })?;
            strict += usize::from(exact.pipeline_latency < greedy.pipeline_latency);
        }
        let replay = evaluate_plan(&exact.use_cache, &c);
        ensure(replay.pipeline_latency == exact.pipeline_latency, || {
            "exact plan misreports latency".into()
        })?;
    }
    let c = costs(1, 3, 2, 4);
    let exact = plan_exact(&c)
        .map_err(|e| e.to_string())?
        .pipeline_latency
        .0;
    let greedy = plan_greedy(&c, TieRule::PreferCache).pipeline_latency.0;
    ensure(exact == 7 && greedy == 9, || {
        format!("(4,1,3,2): exact {exact}, greedy {greedy}")
    })?;
    Ok(format!("{trials} cost triples, greedy strictly worse in {strict} comparisons; (4,1,3,2) exact 7 < greedy 9"))
}

fn bubble_free() -> Outcome {
    let (n, cw, l) = (8usize, 8_000_000u64, 4_000_000u64);
    let c = costs(cw, 3 * cw, l, n);
    let all_cache = evaluate_plan(&vec![true; n], &c);
    let piped =
        execute_plan(&all_cache, &c, ExecMode::Pipelined, |_| true).map_err(|e| e.to_string())?;
    let naive =
        execute_plan(&all_cache, &c, ExecMode::Sequential, |_| true).map_err(|e| e.to_string())?;
    let want_piped = l + n as u64 * cw;
    let want_naive = n as u64 * (l + cw);
    ensure(piped.makespan == Nanos(want_piped), || {
        format!("pipelined {} != {want_piped}", piped.makespan.0)
    })?;
    ensure(naive.makespan == Nanos(want_naive), || {
        format!("sequential {} != {want_naive}", naive.makespan.0)
    })?;
    // Sleeps overshoot, so keep the best of a few live runs.
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let live =
            execute_plan_live(&all_cache, &SleepWork { costs: c }).map_err(|e| e.to_string())?;
        let rel = (live.makespan.0 as f64 - want_piped as f64).abs() / want_piped as f64;
        best = best.min(rel);
    }
    ensure(best <= 0.05, || {
        format!("live makespan off by {:.1}%", best * 100.0)
    })?;
    Ok(format!(
        "virtual {} ms vs sequential {} ms (ratio {:.2}); live within {:.2}%",
        want_piped / 1_000_000,
        want_naive / 1_000_000,
        want_naive as f64 / want_piped as f64,
        best * 100.0
    ))
}

fn base_config(workers: usize, steps: u32) -> RunConfig {
    let mut cfg = RunConfig {
        workers,
        steps_total: steps,
        ..RunConfig::default()
    };
    cfg.workload.duration_s = 300.0;
    cfg
}

/// Runs every variant on every seed at `load` times full-batch capacity.
fn sweep(
    base: &RunConfig,
    load: f64,
    variants: &[(BatchingPolicy, RoutingKind)],
) -> Result<Vec<Vec<RunReport>>, String> {
    let model = base.latency_model().map_err(|e| e.to_string())?;
    let rps = load * capacity_rps(base, &model, 0.11).map_err(|e| e.to_string())?;
    std::thread::scope(|s| {
        let handles: Vec<_> = SEEDS
            .iter()
            .map(|&seed| {
                s.spawn(move || {
                    variants
                        .iter()
                        .map(|&(batching, routing)| {
                            let mut cfg = base.clone();
                            cfg.seed = seed;
                            cfg.workload.rps = rps;
                            cfg.batching = batching;
                            cfg.routing = routing;
                            run(&cfg).map(|o| o.report).map_err(|e| e.to_string())
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread"))
            .collect()
    })
}

fn utilization(r: &RunReport) -> f64 {
    r.workers.iter().map(|w| w.denoise_busy).sum::<f64>() / r.workers.len() as f64
}

fn continuous_vs_static() -> Outcome {
    let runs = sweep(
        &base_config(4, 50),
        0.7,
        &[
            (BatchingPolicy::Static, RoutingKind::MaskAware),
            (BatchingPolicy::Disaggregated, RoutingKind::MaskAware),
        ],
    )?;
    let mut ratios = Vec::new();
    for (seed, r) in SEEDS.iter().zip(&runs) {
        let ratio = r[0].queuing.mean / r[1].queuing.mean;
        ensure(ratio >= 1.6, || {
            format!("seed {seed}: static/continuous queuing {ratio:.2}")
        })?;
        ratios.push(ratio);
    }
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "static/continuous mean queuing >= {min:.1}x on 5 seeds (utilization {:.2})",
        utilization(&runs[0][1])
    ))
}

fn disaggregation() -> Outcome {
    let runs = sweep(
        &base_config(4, 20),
        0.8,
        &[
            (BatchingPolicy::NaiveContinuous, RoutingKind::MaskAware),
            (BatchingPolicy::Disaggregated, RoutingKind::MaskAware),
        ],
    )?;
    let mut gaps = Vec::new();
    for (seed, r) in SEEDS.iter().zip(&runs) {
        let (naive, dis) = (&r[0], &r[1]);
        let gap = naive.e2e.p95 / dis.e2e.p95 - 1.0;
        ensure(gap >= 0.15, || {
            format!("seed {seed}: naive p95 only {:.1}% above", gap * 100.0)
        })?;
        ensure(naive.interruptions.mean > 0.0, || {
            format!("seed {seed}: naive mode had no interruptions")
        })?;
        ensure(dis.interruptions.max == 0.0, || {
            format!("seed {seed}: disaggregated mode was interrupted")
        })?;
        gaps.push(gap);
    }
    let min = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "naive p95 >= {:.0}% above disaggregated; interruptions/request naive {:.1}, disaggregated 0",
        min * 100.0,
        runs[0][0].interruptions.mean
    ))
}

fn mask_aware_routing() -> Outcome {
    let runs = sweep(
        &base_config(8, 50),
        0.75,
        &[
            (BatchingPolicy::Disaggregated, RoutingKind::MaskAware),
            (BatchingPolicy::Disaggregated, RoutingKind::RequestCount),
            (BatchingPolicy::Disaggregated, RoutingKind::TokenCount),
        ],
    )?;
    let mut gains = Vec::new();
    for (seed, r) in SEEDS.iter().zip(&runs) {
        let (aware, count, tokens) = (r[0].e2e.p95, r[1].e2e.p95, r[2].e2e.p95);
        ensure(aware <= tokens, || {
            format!("seed {seed}: p95 {aware:.3} s above token count {tokens:.3} s")
        })?;
        let gain = 1.0 - aware / count;
        ensure(gain >= 0.10, || {
            format!("seed {seed}: only {:.1}% below request count", gain * 100.0)
        })?;
        gains.push(gain);
    }
    let min = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "mask-aware p95 >= {:.1}% below request count and below token count on 5 seeds",
        min * 100.0
    ))
}

fn regression_fit() -> Outcome {
    let pts: Vec<(f64, f64)> = (0..20)
        .map(|i| (i as f64 * 1e9, 3e-12 * i as f64 * 1e9 + 5e-5))
        .collect();
    let f = fit(&pts).map_err(|e| e.to_string())?;
    ensure(f.r2 == 1.0, || format!("synthetic r2 {}", f.r2))?;
    ensure(
        (f.slope / 3e-12 - 1.0).abs() < 1e-12 && (f.intercept / 5e-5 - 1.0).abs() < 1e-9,
        || format!("recovered {f:?}"),
    )?;
    let cal = calibrate(&mut LiveKernelRunner::new(0), &default_live_grid(), 5)
        .map_err(|e| e.to_string())?;
    let r2 = cal.model.comp().map_err(|e| e.to_string())?.r2;
    ensure(r2 >= 0.95, || format!("live compute r2 {r2:.4}"))?;
    Ok(format!("synthetic r2 1.0, live kernel compute r2 {r2:.4}"))
}

fn payload(seed: u32, len: usize) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u32).wrapping_mul(2654435761).wrapping_add(seed) as u8)
        .collect()
}

fn cache_correctness() -> Outcome {
    let sequences = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ops_total = 0;
    for i in 0..sequences {
        let len = rng.random_range(1..60);
        let ops: Vec<_> = (0..len)
            .map(|_| lru_ref::random_op(&mut rng, 10, 40))
            .collect();
        ops_total += len;
        lru_ref::check_sequence(&ops, 100, 120).map_err(|e| format!("sequence {i}: {e}"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = ActivationCache::new(
        3 * 256,
        64 * 256,
        Storage::Directory(dir.path().to_path_buf()),
    )
    .map_err(|e| e.to_string())?;
    let keys: Vec<EntryKey> = (0..8)
        .map(|b| EntryKey::new("tpl", b, 0, CacheVariant::Y))
        .collect();
    let data: Vec<Vec<u8>> = (0..8).map(|i| payload(i, 256)).collect();
    for (k, d) in keys.iter().zip(&data) {
        cache
            .put(k.clone(), Blob::from_vec(d.clone()))
            .map_err(|e| e.to_string())?;
    }
    for _ in 0..4 {
        for (k, d) in keys.iter().zip(&data) {
            let (blob, _pin) = cache
                .get_pinned(k)
                .map_err(|e| e.to_string())?
                .ok_or("entry lost")?;
            let bytes = blob.as_slice().ok_or("payload missing")?;
            ensure(blob_digest(bytes) == blob_digest(d), || {
                format!("digest changed for {k:?}")
            })?;
        }
    }
    let cycles = cache.stats().hits_disk;
    Ok(format!(
        "{sequences} sequences ({ops_total} ops) match the reference, pins held; digests kept over {cycles} promotions"
    ))
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn system_overhead() -> Outcome {
    let cfg = RunConfig {
        workers: 64,
        ..RunConfig::default()
    };
    let model = Arc::new(cfg.latency_model().map_err(|e| e.to_string())?);
    let mut costs = CostModel::new(
        model.clone(),
        cfg.tokens,
        cfg.hidden,
        cfg.n_blocks,
        cfg.cost_planner,
        cfg.tie,
    )
    .map_err(|e| e.to_string())?;
    let policy = RoutingPolicy {
        kind: RoutingKind::MaskAware,
        queue_bound: cfg.queue_bound,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let member = |id: u64, rng: &mut ChaCha8Rng| MemberSummary {
        request_id: id,
        mask_ratio: rng.random_range(1..=64) as f64 / 64.0,
        remaining_steps: rng.random_range(1..=50),
    };
    let snaps: Vec<WorkerSnapshot> = (0..64)
        .map(|w| WorkerSnapshot {
            worker_id: w,
            taken_at: Nanos::ZERO,
            policy: cfg.batching,
            max_batch: cfg.max_batch,
            members: (0..rng.random_range(0..=8))
                .map(|i| member(w as u64 * 100 + i, &mut rng))
                .collect(),
            queued: (0..rng.random_range(0..=3))
                .map(|i| member(w as u64 * 100 + 50 + i, &mut rng))
                .collect(),
            queue_depth: 0,
        })
        .map(|mut s| {
            s.queue_depth = s.queued.len();
            s
        })
        .collect();
    let mut times = Vec::new();
    for id in 0..2000u64 {
        let req = RequestView {
            id: 100_000 + id,
            mask_ratio: rng.random_range(1..=4096) as f64 / 4096.0,
            steps: 50,
        };
        let t0 = Instant::now();
        route(&req, &snaps, &policy, &mut costs).map_err(|e| e.to_string())?;
        times.push(t0.elapsed());
    }
    let route_median = median(times);

    let wcfg = cfg.worker_config(&model).map_err(|e| e.to_string())?;
    let mut worker = Worker::new(0, wcfg, model).map_err(|e| e.to_string())?;
    for id in 0..8 {
        let r = request(id, "tmpl-0", 0.11, 50, Nanos::ZERO).map_err(|e| e.to_string())?;
        worker.submit(r, Nanos::ZERO).map_err(|e| e.to_string())?;
    }
    let mut step_times = Vec::new();
    loop {
        let t0 = Instant::now();
        let report = worker.step().map_err(|e| e.to_string())?;
        let dt = t0.elapsed();
        if report.members.len() == 8 {
            step_times.push(dt);
        }
        // All eight share 50 steps; stop well before they retire.
        if step_times.len() == 40 {
            break;
        }
    }
    ensure(!step_times.is_empty(), || "no full-batch steps".into())?;
    let step_median = median(step_times);
    ensure(route_median < Duration::from_millis(1), || {
        format!("routing median {route_median:?}")
    })?;
    ensure(step_median < Duration::from_millis(2), || {
        format!("step bookkeeping median {step_median:?}")
    })?;
    Ok(format!(
        "routing median {:.1} us at 64 workers; step bookkeeping median {:.1} us at batch 8",
        route_median.as_secs_f64() * 1e6,
        step_median.as_secs_f64() * 1e6
    ))
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.workload.duration_s = 120.0;
    cfg.seed = 9;
    let dirs = [tempfile::tempdir(), tempfile::tempdir()];
    let mut reports = Vec::new();
    for d in &dirs {
        let d = d.as_ref().map_err(|e| e.to_string())?;
        let out = run(&cfg).map_err(|e| e.to_string())?;
        out.write_dir(d.path()).map_err(|e| e.to_string())?;
        reports.push(d.path().to_path_buf());
    }
    let files = [
        "report.json",
        "requests.csv",
        "trace.jsonl",
        "routing.jsonl",
        "events.jsonl",
    ];
    for f in files {
        let a = std::fs::read(reports[0].join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(reports[1].join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!(
        "two runs byte-identical across {} artifacts",
        files.len()
    ))
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    // Timing-sensitive checks run alone before the parallel simulations.
    let serial: [(u32, &str, Check); 4] = [
        (5, "bubble-free executor", bubble_free),
        (9, "regression fit", regression_fit),
        (11, "system overhead", system_overhead),
        (1, "kernel equivalence", kernel_equivalence),
    ];
    let parallel: [(u32, &str, Check); 8] = [
        (2, "flop and cache arithmetic", flop_arithmetic),
        (3, "greedy planner recurrence", greedy_recurrence),
        (4, "exact planner dominance", exact_dominates),
        (6, "continuous vs static batching", continuous_vs_static),
        (7, "disaggregation vs naive continuous", disaggregation),
        (8, "mask-aware routing", mask_aware_routing),
        (10, "cache correctness", cache_correctness),
        (12, "determinism", determinism),
    ];
    let mut results: Vec<(u32, &str, Outcome, f64)> = serial
        .iter()
        .map(|&(n, name, check)| {
            let t0 = Instant::now();
            let out = check();
            (n, name, out, t0.elapsed().as_secs_f64())
        })
        .collect();
    results.extend(std::thread::scope(|s| {
        let handles: Vec<_> = parallel
            .iter()
            .map(|&(n, name, check)| {
                s.spawn(move || {
                    let t0 = Instant::now();
                    let out = check();
                    (n, name, out, t0.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("check thread"))
            .collect::<Vec<_>>()
    }));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, out, secs) in &results {
        match out {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {why} [{secs:.1} s]");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
