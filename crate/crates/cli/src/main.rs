use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use maskserve_core::config::RunConfig;
use maskserve_core::kernel::check::{default_grid, run_grid, CacheMode};
use maskserve_core::kernel::golden;
use maskserve_core::latmodel::{
    calibrate, default_live_grid, default_sim_grid, LiveKernelRunner, SimulatedBackend,
};
use maskserve_core::planner::{
    execute_plan, plan_exact, plan_greedy, plan_optimal, ExecMode, PlanCosts, TieRule,
};
use maskserve_core::scheduler::RoutingKind;
use maskserve_core::worker::BatchingPolicy;
use maskserve_core::workload::{compare, generate, run, write_trace, RunReport};
use maskserve_core::Nanos;

/// Raised when a check ran but did not pass.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser, Debug)]
#[command(
    name = "maskserve",
    version,
    about = "Mask-aware image-editing serving simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare cached forward passes against the dense pass on a seeded grid.
    KernelCheck(KernelCheckArgs),
    /// Fit a latency model and write it as JSON.
    Calibrate(CalibrateArgs),
    /// Plan cache use for one set of block costs.
    Plan(PlanArgs),
    /// Replay a trace through a simulated cluster.
    Simulate(SimulateArgs),
    /// Compare two run reports.
    Report(ReportArgs),
    /// Write the trace a configuration would replay.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Y,
    Kv,
    Both,
}

#[derive(clap::Args, Debug)]
struct KernelCheckArgs {
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Perturb cached keys before the K/V pass (negative control).
    #[arg(long)]
    corrupt_cache: bool,
    /// Also verify checksums recorded in this CSV file.
    #[arg(long)]
    golden: Option<PathBuf>,
    /// Write checksums of the built-in golden cases to this file.
    #[arg(long)]
    write_golden: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Sim,
    Live,
}

#[derive(clap::Args, Debug)]
struct CalibrateArgs {
    #[arg(long, value_enum, default_value = "sim")]
    backend: Backend,
    #[arg(long, default_value = "latency_model.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct PlanArgs {
    /// Block latency with cached activations.
    #[arg(long)]
    cw: u64,
    /// Block latency computing all tokens.
    #[arg(long)]
    cwo: u64,
    /// Load latency of one block's activations.
    #[arg(long)]
    load: u64,
    #[arg(long)]
    blocks: usize,
    /// Write the exact plan's lane schedule here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Default)]
struct ConfigArgs {
    /// JSON configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any field, e.g. `--set workload.rps=3` (value parsed as JSON
    /// when possible).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    batching: Option<BatchingPolicy>,
    #[arg(long)]
    routing: Option<RoutingKind>,
    #[arg(long)]
    rps: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    latency_model: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Exact run directory, overriding the timestamped name.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    /// Report file or run directory.
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "trace.jsonl")]
    out: PathBuf,
}

fn set_path(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("`--set {assignment}` is not KEY=VALUE"))?;
    let value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("`{key}`: `{part}` is not inside an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            RunConfig::from_json(&text)
                .with_context(|| format!("invalid config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    let mut doc = serde_json::to_value(&base)?;
    for s in &args.sets {
        set_path(&mut doc, s)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).context("invalid --set override")?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }
    if let Some(v) = args.batching {
        cfg.batching = v;
    }
    if let Some(v) = args.routing {
        cfg.routing = v;
    }
    if let Some(v) = args.rps {
        cfg.workload.rps = v;
    }
    if let Some(v) = args.duration {
        cfg.workload.duration_s = v;
    }
    if let Some(v) = args.steps {
        cfg.steps_total = v;
    }
    if let Some(v) = &args.trace {
        cfg.workload.trace = Some(v.clone());
    }
    if let Some(v) = &args.latency_model {
        cfg.latency_model = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn kernel_check(args: KernelCheckArgs) -> Result<()> {
    let cases = default_grid(args.seed);
    let t0 = std::time::Instant::now();
    let report = run_grid(&cases, args.corrupt_cache)?;
    println!(
        "cases: {} ({:.2} s)",
        report.cases,
        t0.elapsed().as_secs_f64()
    );
    let modes: &[CacheMode] = match args.mode {
        ModeArg::Y => &[CacheMode::Y],
        ModeArg::Kv => &[CacheMode::Kv],
        ModeArg::Both => &[CacheMode::Y, CacheMode::Kv],
    };
    let mut breach = Vec::new();
    for &mode in modes {
        let (name, bytes) = match mode {
            CacheMode::Y => ("y", report.ycache_bytes),
            CacheMode::Kv => ("kv", report.kvcache_bytes),
        };
        let err = report.max_rel_err(Some(mode));
        println!("mode {name}: max relative error {err:.3e}, cache bytes {bytes}");
        if err.is_nan() || err > args.tolerance {
            breach.push(format!(
                "mode {name} error {err:.3e} above {:.1e}",
                args.tolerance
            ));
        }
    }
    if !report.unmasked_rows_exact {
        breach.push("unmasked rows differ from the cache".into());
    }
    if let Some(path) = &args.write_golden {
        let rows = golden::generate(&golden::default_cases())?;
        golden::write_rows(create(path)?, &rows)?;
        println!("wrote {} golden rows to {}", rows.len(), path.display());
    }
    if let Some(path) = &args.golden {
        let f = File::open(path)
            .with_context(|| format!("cannot open golden file {}", path.display()))?;
        let rows = golden::read_rows(f)
            .with_context(|| format!("invalid golden file {}", path.display()))?;
        let drift = golden::verify(&rows)?;
        println!(
            "golden: {} rows, max checksum drift {drift:.3e}",
            rows.len()
        );
        if drift > 1e-6 {
            breach.push(format!("golden checksum drift {drift:.3e}"));
        }
    }
    if breach.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(CheckFailed(breach.join("; ")).into())
    }
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let cal = match args.backend {
        Backend::Sim => calibrate(
            &mut SimulatedBackend::default(),
            &default_sim_grid(),
            args.reps,
        )?,
        Backend::Live => calibrate(
            &mut LiveKernelRunner::new(args.seed),
            &default_live_grid(),
            args.reps,
        )?,
    };
    for w in &cal.warnings {
        log::warn!("{w}");
    }
    let comp = cal.model.comp()?;
    let load = cal.model.load()?;
    println!(
        "compute: slope {:.6e} s/flop, intercept {:.6e} s, r2 {:.6}",
        comp.slope, comp.intercept, comp.r2
    );
    println!(
        "load: slope {:.6e} s/byte, intercept {:.6e} s, r2 {:.6}",
        load.slope, load.intercept, load.r2
    );
    std::fs::write(&args.out, cal.model.to_json()?)
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn plan_cmd(args: PlanArgs) -> Result<()> {
    let costs = PlanCosts::new(
        Nanos(args.cw),
        Nanos(args.cwo),
        Nanos(args.load),
        args.blocks,
    )?;
    let show = |name: &str, use_cache: &[bool], latency: Nanos| {
        let bits: String = use_cache
            .iter()
            .map(|c| if *c { 'C' } else { '-' })
            .collect();
        println!("{name:<16} latency {:<8} plan {bits}", latency.0);
    };
    let le = plan_greedy(&costs, TieRule::PreferCache);
    let lt = plan_greedy(&costs, TieRule::PreferCompute);
    show("greedy(<=)", &le.use_cache, le.pipeline_latency);
    show("greedy(<)", &lt.use_cache, lt.pipeline_latency);
    let exact = match plan_exact(&costs) {
        Ok(p) => {
            show("exact", &p.use_cache, p.pipeline_latency);
            p
        }
        Err(e) => {
            println!("exact            skipped: {e}");
            plan_optimal(&costs, &[])
        }
    };
    let opt = plan_optimal(&costs, &[]);
    show("optimal", &opt.use_cache, opt.pipeline_latency);
    let trace = execute_plan(&exact, &costs, ExecMode::Pipelined, |_| true)?;
    match &args.csv {
        Some(path) => {
            trace.write_csv(create(path)?)?;
            println!("wrote schedule to {}", path.display());
        }
        None => {
            println!();
            trace.write_csv(std::io::stdout().lock())?;
        }
    }
    Ok(())
}

fn simulate_cmd(args: SimulateArgs) -> Result<()> {
    let cfg = load_config(&args.cfg)?;
    let dir = match args.run_dir {
        Some(d) => d,
        None => args.out.join(format!(
            "{}-seed{}",
            chrono::Local::now().format("%Y%m%dT%H%M%S"),
            cfg.seed
        )),
    };
    let out = run(&cfg)?;
    out.write_dir(&dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())
        .with_context(|| format!("cannot write into {}", dir.display()))?;
    let r = &out.report;
    println!("run {}", r.label);
    println!(
        "requests {} completed {} rejected {}",
        r.requests, r.completed, r.rejected
    );
    println!(
        "e2e mean {:.3} s median {:.3} s p95 {:.3} s",
        r.e2e.mean, r.e2e.median, r.e2e.p95
    );
    println!(
        "queuing mean {:.3} s p95 {:.3} s",
        r.queuing.mean, r.queuing.p95
    );
    println!(
        "throughput {:.3} rps (offered {:.3})",
        r.throughput_rps, r.offered_rps
    );
    println!(
        "routing decision median {:.1} us, step bookkeeping median {:.1} us",
        out.overhead.routing_decision.median * 1e6,
        out.overhead.step_bookkeeping.median * 1e6
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn read_report(path: &Path) -> Result<RunReport> {
    let file = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file)
        .with_context(|| format!("cannot read report {}", file.display()))?;
    RunReport::from_json(&text).with_context(|| format!("invalid report {}", file.display()))
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let a = read_report(&args.a)?;
    let b = read_report(&args.b)?;
    let table = compare(&a, &b);
    print!("{}", table.render());
    if let Some(path) = &args.csv {
        table.write_csv(create(path)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn generate_cmd(args: GenerateArgs) -> Result<()> {
    let cfg = load_config(&args.cfg)?;
    if cfg.workload.trace.is_some() {
        bail!("generate builds a trace from the workload settings; drop `workload.trace`");
    }
    let trace = generate(&cfg.trace_spec())?;
    let mut out = create(&args.out)?;
    write_trace(&trace, &mut out)?;
    out.flush()?;
    println!("wrote {} requests to {}", trace.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::KernelCheck(a) => kernel_check(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Generate(a) => generate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<CheckFailed>() => {
            eprintln!("check failed: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
