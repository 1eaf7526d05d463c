//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime error (I/O, config, trace), 2 usage,
//! 3 coherence invariant violated, 4 exploration or event budget exhausted.

use crate::checker::{self, CheckOutcome, Limits, Program};
use crate::coherence::BlockAddress;
use crate::config::{MachineParams, SimConfig, SizeClass};
use crate::engine::{self, EngineParams, RunError, RunStats};
use crate::hta::HtaSystem;
use crate::protocol::{Fault, FaultPlan, MemOp};
use crate::rainbow::RainbowSystem;
use crate::workload::{self, GeneratorSpec, Pattern, TraceRecord};
use clap::{Args, Parser, Subcommand};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rainbow-sim", version, about = "Multi-chip cache coherence simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one protocol over one trace and write CSV statistics.
    Simulate(SimulateArgs),
    /// Run a protocol x size-class x pattern grid and write sweep.csv.
    Sweep(SweepArgs),
    /// Exhaustively explore message interleavings on a tiny machine.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Protocol {
    Rainbow,
    Hta,
}

impl Protocol {
    fn parse(s: &str) -> Result<Protocol, String> {
        match s {
            "rainbow" => Ok(Protocol::Rainbow),
            "hta" => Ok(Protocol::Hta),
            other => Err(format!("unknown protocol '{other}' (rainbow, hta)")),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Protocol::Rainbow => "rainbow",
            Protocol::Hta => "hta",
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Protocol: rainbow or hta.
    #[arg(long, default_value = "rainbow")]
    protocol: String,
    /// Tracking-structure size class: L, M or S.
    #[arg(long, default_value = "L")]
    class: String,
    /// Machine description (TOML); built-in reference machine if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace file; a synthetic trace is generated if omitted.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Synthetic pattern: private, shared-uniform, producer-consumer, migratory.
    #[arg(long, default_value = "private")]
    pattern: String,
    #[arg(long, default_value_t = 1000)]
    ops_per_core: u64,
    /// Footprint in blocks (per region).
    #[arg(long, default_value_t = 256)]
    footprint: u64,
    #[arg(long, default_value_t = 0.5)]
    shared_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seed one protocol bug (see `--fault help`).
    #[arg(long)]
    fault: Option<String>,
    /// Run a full invariant audit every N cycles.
    #[arg(long)]
    audit_every: Option<u64>,
    #[arg(long)]
    max_events: Option<u64>,
    /// Output directory for stats.csv, latency_breakdown.csv, links.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated list.
    #[arg(long, default_value = "rainbow,hta")]
    protocols: String,
    #[arg(long, default_value = "L,M,S")]
    classes: String,
    #[arg(long, default_value = "private,shared-uniform,producer-consumer,migratory")]
    patterns: String,
    #[arg(long, default_value_t = 1000)]
    ops_per_core: u64,
    #[arg(long, default_value_t = 256)]
    footprint: u64,
    #[arg(long, default_value_t = 0.5)]
    shared_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// rainbow, hta or both.
    #[arg(long, default_value = "both")]
    protocol: String,
    #[arg(long, default_value_t = 2)]
    chips: u32,
    #[arg(long, default_value_t = 2)]
    cores_per_chip: u32,
    /// Distinct blocks touched by the generated conflict program.
    #[arg(long, default_value_t = 2)]
    blocks: u64,
    #[arg(long, default_value_t = 2)]
    ops_per_core: u64,
    #[arg(long)]
    fault: Option<String>,
    #[arg(long, default_value_t = 2_000_000)]
    max_states: u64,
}

enum CliError {
    Runtime(String),
    Violation(String),
    Budget(String),
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::EventBudget { .. } => CliError::Budget(e.to_string()),
            _ => CliError::Violation(e.to_string()),
        }
    }
}

fn parse_fault(s: &Option<String>) -> Result<FaultPlan, CliError> {
    match s {
        None => Ok(FaultPlan::none()),
        Some(name) => Fault::parse(name).map(FaultPlan::seeded).ok_or_else(|| {
            let all: Vec<&str> = Fault::ALL.iter().map(|f| f.name()).collect();
            CliError::Runtime(format!(
                "unknown fault '{name}' (known: {})",
                all.join(", ")
            ))
        }),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<SimConfig, CliError> {
    match path {
        None => Ok(SimConfig::default()),
        Some(p) => SimConfig::load(p).map_err(|e| CliError::Runtime(e.to_string())),
    }
}

fn parse_class(s: &str) -> Result<SizeClass, CliError> {
    SizeClass::parse(s)
        .ok_or_else(|| CliError::Runtime(format!("unknown size class '{s}' (L, M, S)")))
}

fn parse_pattern(s: &str) -> Result<Pattern, CliError> {
    Pattern::parse(s).ok_or_else(|| {
        CliError::Runtime(format!(
            "unknown pattern '{s}' (private, shared-uniform, producer-consumer, migratory)"
        ))
    })
}

fn run_one(
    protocol: Protocol,
    params: MachineParams,
    fault: FaultPlan,
    engine_params: &EngineParams,
    trace: &[TraceRecord],
) -> Result<RunStats, RunError> {
    match protocol {
        Protocol::Rainbow => {
            let mut sys = RainbowSystem::new(params, fault);
            engine::run(&mut sys, engine_params, trace)
        }
        Protocol::Hta => {
            let mut sys = HtaSystem::new(params, fault);
            engine::run(&mut sys, engine_params, trace)
        }
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    std::fs::write(path, content).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn stats_csv(stats: &RunStats) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "completion_cycle,{}", stats.completion_cycle);
    let _ = writeln!(s, "accesses,{}", stats.accesses);
    let _ = writeln!(s, "reads,{}", stats.reads);
    let _ = writeln!(s, "writes,{}", stats.writes);
    let _ = writeln!(s, "total_latency,{}", stats.total_latency);
    let _ = writeln!(s, "avg_latency,{:.4}", stats.avg_latency());
    let _ = writeln!(s, "messages_sent,{}", stats.messages_sent);
    let _ = writeln!(s, "bytes_sent,{}", stats.bytes_sent);
    for (k, v) in &stats.counters {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

pub fn latency_csv(stats: &RunStats) -> String {
    let mut s = String::from("class,accesses,total_cycles,avg_cycles\n");
    for (class, (total, count)) in &stats.latency {
        let avg = if *count == 0 {
            0.0
        } else {
            *total as f64 / *count as f64
        };
        let _ = writeln!(s, "{class},{count},{total},{avg:.4}");
    }
    s
}

pub fn links_csv(stats: &RunStats) -> String {
    let mut s = String::from("link,flits\n");
    for (link, ls) in &stats.links {
        let _ = writeln!(s, "{link},{}", ls.flits);
    }
    s
}

fn make_trace(
    pattern: Pattern,
    ops_per_core: u64,
    footprint: u64,
    shared_fraction: f64,
    seed: u64,
    cfg: &SimConfig,
) -> Vec<TraceRecord> {
    let spec = GeneratorSpec {
        pattern,
        footprint_blocks: footprint,
        ops_per_core,
        shared_fraction,
        seed,
    };
    workload::generate(&spec, &cfg.shape())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let protocol = Protocol::parse(&args.protocol).map_err(CliError::Runtime)?;
    let class = parse_class(&args.class)?;
    let cfg = load_config(&args.config)?;
    let fault = parse_fault(&args.fault)?;
    let params = MachineParams::derive(&cfg, class);
    let trace = match &args.trace {
        Some(p) => {
            let t = workload::load_trace(p).map_err(|e| CliError::Runtime(e.to_string()))?;
            workload::validate_trace(&t, &cfg.shape()).map_err(CliError::Runtime)?;
            t
        }
        None => make_trace(
            parse_pattern(&args.pattern)?,
            args.ops_per_core,
            args.footprint,
            args.shared_fraction,
            args.seed,
            &cfg,
        ),
    };
    let engine_params = EngineParams {
        lat: params.lat,
        audit_every: args.audit_every,
        max_events: args.max_events.unwrap_or(u64::MAX),
    };
    let stats = run_one(protocol, params, fault, &engine_params, &trace)?;
    write_file(&args.out.join("stats.csv"), &stats_csv(&stats))?;
    write_file(&args.out.join("latency_breakdown.csv"), &latency_csv(&stats))?;
    write_file(&args.out.join("links.csv"), &links_csv(&stats))?;
    println!(
        "{} {} completed: {} accesses in {} cycles, avg latency {:.2}",
        protocol.label(),
        class.label(),
        stats.accesses,
        stats.completion_cycle,
        stats.avg_latency()
    );
    Ok(())
}

pub fn sweep_row(
    protocol: &str,
    class: &str,
    pattern: &str,
    stats: &RunStats,
) -> String {
    let served = |c: &str| stats.latency.get(c).map(|(_, n)| *n).unwrap_or(0);
    format!(
        "{protocol},{class},{pattern},{},{:.4},{},{},{},{},{},{},{},{}\n",
        stats.completion_cycle,
        stats.avg_latency(),
        stats.accesses,
        served("l1"),
        served("l2"),
        served("on_chip"),
        served("remote_chip"),
        served("memory"),
        stats.counter("external_invalidations"),
        stats.counter("external_invalidation_misses"),
    )
}

pub const SWEEP_HEADER: &str = "protocol,class,pattern,completion_cycle,avg_latency,accesses,\
served_l1,served_l2,served_on_chip,served_remote_chip,served_memory,\
external_invalidations,external_invalidation_misses\n";

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let mut protocols = Vec::new();
    for p in args.protocols.split(',') {
        protocols.push(Protocol::parse(p.trim()).map_err(CliError::Runtime)?);
    }
    let mut classes = Vec::new();
    for c in args.classes.split(',') {
        classes.push(parse_class(c.trim())?);
    }
    let mut patterns = Vec::new();
    for p in args.patterns.split(',') {
        patterns.push(parse_pattern(p.trim())?);
    }
    let mut csv = String::from(SWEEP_HEADER);
    for &protocol in &protocols {
        for &class in &classes {
            let params = MachineParams::derive(&cfg, class);
            for &pattern in &patterns {
                let trace = make_trace(
                    pattern,
                    args.ops_per_core,
                    args.footprint,
                    args.shared_fraction,
                    args.seed,
                    &cfg,
                );
                let engine_params = EngineParams {
                    lat: params.lat,
                    audit_every: None,
                    max_events: u64::MAX,
                };
                let stats =
                    run_one(protocol, params.clone(), FaultPlan::none(), &engine_params, &trace)?;
                let pat_label = format!("{pattern:?}").to_lowercase();
                csv.push_str(&sweep_row(
                    protocol.label(),
                    class.label(),
                    &pat_label,
                    &stats,
                ));
            }
        }
    }
    write_file(&args.out.join("sweep.csv"), &csv)?;
    println!(
        "sweep complete: {} rows -> {}",
        protocols.len() * classes.len() * patterns.len(),
        args.out.join("sweep.csv").display()
    );
    Ok(())
}

/// Deterministic conflict-heavy program: cores hammer a small set of shared
/// blocks with interleaved reads and writes.
pub fn conflict_program(cores: u32, blocks: u64, ops_per_core: u64) -> Program {
    let per_core = (0..cores)
        .map(|c| {
            (0..ops_per_core)
                .map(|j| {
                    let op = if (c as u64 + j) % 2 == 0 {
                        MemOp::Write
                    } else {
                        MemOp::Read
                    };
                    let addr = BlockAddress(((j + c as u64) % blocks) * 64);
                    (op, addr)
                })
                .collect()
        })
        .collect();
    Program { per_core }
}

fn check_one(
    protocol: Protocol,
    args: &CheckArgs,
    fault: FaultPlan,
) -> Result<(), CliError> {
    let params = MachineParams::tiny(args.chips, args.cores_per_chip);
    let program = conflict_program(
        args.chips * args.cores_per_chip,
        args.blocks,
        args.ops_per_core,
    );
    let limits = Limits {
        max_states: args.max_states,
    };
    let outcome = match protocol {
        Protocol::Rainbow => checker::explore(
            RainbowSystem::new(params.clone(), fault),
            &program,
            limits,
        ),
        Protocol::Hta => {
            checker::explore(HtaSystem::new(params.clone(), fault), &program, limits)
        }
    };
    match outcome {
        CheckOutcome::Pass { states, terminals } => {
            println!(
                "{}: pass ({states} states, {terminals} terminal states)",
                protocol.label()
            );
            Ok(())
        }
        CheckOutcome::Failed { violation, trace } => {
            let confirmed = match protocol {
                Protocol::Rainbow => checker::replay(
                    RainbowSystem::new(params.clone(), fault),
                    &program,
                    &trace,
                ),
                Protocol::Hta => {
                    checker::replay(HtaSystem::new(params, fault), &program, &trace)
                }
            };
            let mut msg = format!("{}: {violation}\nwitness ({} moves):\n", protocol.label(), trace.len());
            for mv in &trace {
                let _ = writeln!(msg, "  {mv}");
            }
            match confirmed {
                Err(_) => msg.push_str("witness replay: reproduces\n"),
                Ok(()) => msg.push_str("witness replay: did NOT reproduce\n"),
            }
            Err(CliError::Violation(msg))
        }
        CheckOutcome::BudgetExceeded { states } => Err(CliError::Budget(format!(
            "{}: state budget exhausted after {states} states",
            protocol.label()
        ))),
    }
}

fn cmd_check(args: &CheckArgs) -> Result<(), CliError> {
    let fault = parse_fault(&args.fault)?;
    let protocols: Vec<Protocol> = match args.protocol.as_str() {
        "both" => vec![Protocol::Rainbow, Protocol::Hta],
        other => vec![Protocol::parse(other).map_err(CliError::Runtime)?],
    };
    for p in protocols {
        check_one(p, args, fault)?;
    }
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Violation(m)) => {
            eprintln!("violation: {m}");
            ExitCode::from(3)
        }
        Err(CliError::Budget(m)) => {
            eprintln!("budget: {m}");
            ExitCode::from(4)
        }
    }
}
