//! Command line front end: trace generation, single runs, sweeps, config
//! dumps. Reports are written as JSON plus plot-ready CSV tables; all
//! outputs are byte-identical across identical invocations.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime error.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use moepim::config::{Configs, GroupingStrategy, ScheduleStrategy, CONFIG_PATH_ENV};
use moepim::engine::{self, RunResult, SweepAxis, SweepResult};
use moepim::trace::Trace;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "moepim",
    version,
    about = "Cost simulator for mixture-of-experts inference on \
             processing-in-memory hardware with shared peripherals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic gate-score trace file.
    GenTrace(GenTraceArgs),
    /// Run one experiment and write its report.
    Run(RunArgs),
    /// Run a labeled family of experiments and write comparison tables.
    Sweep(SweepArgs),
    /// Print the effective configuration as TOML.
    DumpConfig(DumpConfigArgs),
}

#[derive(Args)]
struct GenTraceArgs {
    /// Total tokens (rows) in the trace.
    #[arg(long)]
    tokens: usize,
    /// Gate width (experts, columns).
    #[arg(long)]
    experts: usize,
    /// Scale of the per-expert popularity bias; 0 keeps experts exchangeable.
    #[arg(long, default_value_t = 0.0)]
    skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompt-region marker stored in the file header.
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Config TOML; falls back to $MOEPIM_CONFIG, then to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: PathBuf,
    /// Label embedded in the report and output file names.
    #[arg(long, default_value = "run")]
    label: String,
    /// Directory receiving <label>.json and <label>.steps.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Print the prefill schedule slot grid.
    #[arg(long)]
    print_schedule: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: PathBuf,
    /// Axis spec `name=v1,v2,...`; repeatable. Axes: group_size, grouping
    /// (uniform|workload-sorted), schedule (token-wise|compact|rescheduled),
    /// gen_len, kv_cache, go_cache, seed.
    #[arg(long = "axis", value_name = "NAME=VALUES")]
    axes: Vec<String>,
    /// Run the canonical nine-way strategy grid (B, U2C ... S4O) instead of
    /// axes.
    #[arg(long, conflicts_with = "axes")]
    strategy_grid: bool,
    /// Label the ratio table is computed against; defaults to the first run.
    #[arg(long)]
    baseline: Option<String>,
    /// Directory receiving sweep.json, comparison.csv and gen_latency.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct DumpConfigArgs {
    /// Load, validate and canonicalize this file; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    /// Bad flags or bad configuration: exit 1.
    Usage(String),
    /// The experiment itself failed: exit 2.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenTrace(args) => cmd_gen_trace(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::DumpConfig(args) => cmd_dump_config(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_configs(flag: &Option<PathBuf>) -> Result<Configs, CliError> {
    let path = flag
        .clone()
        .or_else(|| std::env::var_os(CONFIG_PATH_ENV).map(PathBuf::from));
    match path {
        Some(p) => Configs::load(&p).map_err(|e| CliError::Usage(e.to_string())),
        None => Ok(Configs::default()),
    }
}

fn load_trace(path: &Path) -> Result<Trace, CliError> {
    Trace::import(path).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Write via a temp file in the target directory, then rename into place.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create temp file in {}: {e}", dir.display())))?;
    std::io::Write::write_all(&mut tmp, contents.as_bytes())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| CliError::Runtime(format!("cannot persist {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gen_trace(args: GenTraceArgs) -> Result<(), CliError> {
    if args.tokens == 0 || args.experts == 0 {
        return Err(CliError::Usage("--tokens and --experts must be positive".into()));
    }
    let prompt_len = args.prompt_len.unwrap_or(args.tokens);
    if prompt_len == 0 || prompt_len > args.tokens {
        return Err(CliError::Usage(format!(
            "--prompt-len {prompt_len} outside 1..={}",
            args.tokens
        )));
    }
    if args.skew < 0.0 || !args.skew.is_finite() {
        return Err(CliError::Usage(format!("--skew {} must be finite and >= 0", args.skew)));
    }
    let trace = Trace::generate(args.tokens, args.experts, prompt_len, args.skew, args.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    write_atomic(&args.out, &trace.to_text())?;

    // Per-expert top-1 hit counts, a quick skew sanity check.
    let mut histogram = vec![0usize; args.experts];
    for t in 0..trace.tokens() {
        let row = trace.row(t);
        let best = (0..args.experts)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap();
        histogram[best] += 1;
    }
    println!("{} tokens x {} experts, skew {}, seed {}", args.tokens, args.experts, args.skew, args.seed);
    println!("top-1 hits per expert: {histogram:?}");
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '-' })
        .collect()
}

fn float(v: f64) -> String {
    format!("{v}")
}

fn steps_csv(result: &RunResult) -> String {
    let mut out = String::from(
        "step,token,selected_experts,expert_passes,evictions,go_score_bytes,go_output_bytes,\
         kv_bytes,bypassed_expert_passes,bypassed_gate_tokens,latency_ns,energy_nj,\
         moe_latency_ns,transfer_latency_ns,attention_latency_ns,cache_latency_ns,\
         moe_energy_nj,transfer_energy_nj,attention_energy_nj,cache_energy_nj\n",
    );
    for s in &result.decode_steps {
        let experts = s
            .selected_experts
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("+");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.step,
            s.token,
            experts,
            s.expert_passes,
            s.evictions,
            s.go_score_bytes,
            s.go_output_bytes,
            s.kv_bytes,
            s.bypassed_expert_passes,
            s.bypassed_gate_tokens,
            float(s.cost.latency_ns()),
            float(s.cost.energy_nj()),
            float(s.cost.moe_compute.latency_ns),
            float(s.cost.data_transfer.latency_ns),
            float(s.cost.attention.latency_ns),
            float(s.cost.cache_traffic.latency_ns),
            float(s.cost.moe_compute.energy_nj),
            float(s.cost.data_transfer.energy_nj),
            float(s.cost.attention.energy_nj),
            float(s.cost.cache_traffic.energy_nj),
        );
    }
    out
}

fn print_run_summary(r: &RunResult) {
    let label = r.label.as_deref().unwrap_or("run");
    println!(
        "{label}: latency {} ns, energy {} nJ, area {} mm2, {} GOPS/mm2, density {} GOPS/W/mm2 \
         (prefill makespan {}, transfers {})",
        float(r.report.latency_ns),
        float(r.report.energy_nj),
        float(r.report.area.total_mm2),
        float(r.report.metrics.gops_per_mm2),
        float(r.report.metrics.density),
        r.prefill.makespan,
        r.prefill.transfers,
    );
    if r.report.go_cache_noop {
        println!("note: gate-output cache has no effect under token-choice decode");
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let configs = load_configs(&args.config)?;
    let trace = load_trace(&args.trace)?;
    let mut result = engine::run(&configs, &trace).map_err(engine_error)?;
    result.label = Some(args.label.clone());
    if args.print_schedule {
        let (_, _, schedule) = engine::prefill_parts(&configs, &trace).map_err(engine_error)?;
        print!("{}", schedule.to_text_grid());
    }
    let stem = sanitize(&args.label);
    write_atomic(&args.out.join(format!("{stem}.json")), &result.report_json())?;
    write_atomic(&args.out.join(format!("{stem}.steps.csv")), &steps_csv(&result))?;
    print_run_summary(&result);
    Ok(())
}

fn engine_error(e: engine::EngineError) -> CliError {
    match e {
        engine::EngineError::Config(inner) => CliError::Usage(inner.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn parse_axis(spec: &str) -> Result<SweepAxis, CliError> {
    let usage = |msg: String| CliError::Usage(msg);
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("axis {spec:?} is not of the form name=v1,v2")))?;
    let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(usage(format!("axis {name} has no values")));
    }
    fn parse_all<T: std::str::FromStr>(name: &str, values: &[&str]) -> Result<Vec<T>, CliError> {
        values
            .iter()
            .map(|v| {
                v.parse().map_err(|_| {
                    CliError::Usage(format!("axis {name}: cannot parse value {v:?}"))
                })
            })
            .collect()
    }
    match name {
        "group_size" => Ok(SweepAxis::GroupSize(parse_all(name, &values)?)),
        "gen_len" => Ok(SweepAxis::GenLen(parse_all(name, &values)?)),
        "seed" => Ok(SweepAxis::Seed(parse_all(name, &values)?)),
        "kv_cache" => Ok(SweepAxis::KvCache(parse_all(name, &values)?)),
        "go_cache" => Ok(SweepAxis::GoCache(parse_all(name, &values)?)),
        "grouping" => values
            .iter()
            .map(|v| match *v {
                "uniform" => Ok(GroupingStrategy::Uniform),
                "workload-sorted" => Ok(GroupingStrategy::WorkloadSorted),
                other => Err(usage(format!(
                    "axis grouping: {other:?} is not uniform|workload-sorted"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(SweepAxis::Grouping),
        "schedule" => values
            .iter()
            .map(|v| match *v {
                "token-wise" => Ok(ScheduleStrategy::TokenWise),
                "compact" => Ok(ScheduleStrategy::Compact),
                "rescheduled" => Ok(ScheduleStrategy::Rescheduled),
                other => Err(usage(format!(
                    "axis schedule: {other:?} is not token-wise|compact|rescheduled"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(SweepAxis::Schedule),
        other => Err(usage(format!(
            "unknown axis {other:?}; valid: group_size, grouping, schedule, gen_len, kv_cache, go_cache, seed"
        ))),
    }
}

/// Latency/energy are improvement ratios (baseline over run, higher is
/// better); area efficiency is run over baseline.
fn comparison_csv(sweep: &SweepResult, baseline: &RunResult) -> String {
    let mut out = String::from(
        "label,latency_ns,energy_nj,area_mm2,gops_per_mm2,density,\
         latency_speedup,energy_saving,area_efficiency_gain\n",
    );
    let b = &baseline.report;
    for r in &sweep.runs {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.label.as_deref().unwrap_or(""),
            float(m.latency_ns),
            float(m.energy_nj),
            float(m.area.total_mm2),
            float(m.metrics.gops_per_mm2),
            float(m.metrics.density),
            float(if m.latency_ns == 0.0 { 0.0 } else { b.latency_ns / m.latency_ns }),
            float(if m.energy_nj == 0.0 { 0.0 } else { b.energy_nj / m.energy_nj }),
            float(if b.metrics.gops_per_mm2 == 0.0 {
                0.0
            } else {
                m.metrics.gops_per_mm2 / b.metrics.gops_per_mm2
            }),
        );
    }
    out
}

fn gen_latency_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("label,gen_len,decode_latency_ns,total_latency_ns\n");
    for r in &sweep.runs {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.label.as_deref().unwrap_or(""),
            r.configs.experiment.gen_len,
            float(r.report.decode.latency_ns()),
            float(r.report.latency_ns),
        );
    }
    out
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let configs = load_configs(&args.config)?;
    let trace = load_trace(&args.trace)?;
    let items = if args.strategy_grid {
        engine::strategy_grid(&configs)
    } else {
        let axes = args
            .axes
            .iter()
            .map(|s| parse_axis(s))
            .collect::<Result<Vec<_>, _>>()?;
        engine::expand_axes(&configs, &axes).map_err(engine_error)?
    };
    let baseline_label = args
        .baseline
        .clone()
        .unwrap_or_else(|| items[0].0.clone());
    if !items.iter().any(|(l, _)| *l == baseline_label) {
        return Err(CliError::Usage(format!(
            "baseline {baseline_label:?} is not among the sweep labels: {:?}",
            items.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>()
        )));
    }

    let sweep = if args.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build()
            .map_err(|e| CliError::Runtime(format!("cannot build thread pool: {e}")))?;
        let runs = pool.install(|| {
            items
                .par_iter()
                .map(|(label, c)| {
                    engine::run(c, &trace).map(|mut r| {
                        r.label = Some(label.clone());
                        r
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        });
        SweepResult { runs: runs.map_err(engine_error)? }
    } else {
        engine::sweep(&items, &trace).map_err(engine_error)?
    };

    let baseline = sweep.find(&baseline_label).expect("baseline label verified above").clone();
    write_atomic(&args.out.join("sweep.json"), &sweep.report_json())?;
    write_atomic(&args.out.join("comparison.csv"), &comparison_csv(&sweep, &baseline))?;
    write_atomic(&args.out.join("gen_latency.csv"), &gen_latency_csv(&sweep))?;
    println!("baseline: {baseline_label}");
    for r in &sweep.runs {
        print_run_summary(r);
    }
    Ok(())
}

fn cmd_dump_config(args: DumpConfigArgs) -> Result<(), CliError> {
    let configs = load_configs(&args.config)?;
    let text = configs.dump();
    match args.out {
        Some(path) => write_atomic(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
