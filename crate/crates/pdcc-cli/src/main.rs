//! Command-line runner: simulate scenarios, sweep seeds, explore message
//! interleavings, and audit traces.
//!
//! Exit codes: 0 all checks pass, 1 property violation, 2 configuration or
//! usage error, 3 step or state budget exhausted.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pdcc::checker::{Checker, Report, Status};
use pdcc::explore::{explore_interleavings, ExploreMode};
use pdcc::simnet::{RunOutcome, Scenario, Simulation};
use pdcc::trace::{Effect, TraceRecord};

#[derive(Parser)]
#[command(
    name = "pdcc",
    about = "Certificate-based payments with dynamic reconfiguration: \
             deterministic simulation, exploration, and trace auditing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CheckMode {
    Online,
    Offline,
    Both,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Simulation seed; defaults to the scenario's default seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Step budget.
    #[arg(long, default_value_t = 100_000)]
    max_steps: u64,
    /// Write the trace as JSON Lines.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Which checks gate the exit code.
    #[arg(long, value_enum, default_value = "both")]
    check: CheckMode,
    /// Write the verdict report as JSON.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Load scenarios that violate the fault bound or overlap condition.
    #[arg(long)]
    allow_assumption_violations: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Seed range, inclusive start, exclusive end (e.g. 0..100).
    #[arg(long)]
    seeds: String,
    #[arg(long, default_value_t = 100_000)]
    max_steps: u64,
    #[arg(long, value_enum, default_value = "both")]
    check: CheckMode,
    #[arg(long)]
    allow_assumption_violations: bool,
}

#[derive(Args)]
struct ExploreArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Exhaustive exploration depth (scheduling decisions).
    #[arg(long, default_value_t = 12)]
    depth: usize,
    /// State budget for exhaustive exploration.
    #[arg(long, default_value_t = 5_000_000)]
    max_states: u64,
    /// Randomized mode instead: sweep simulator seeds (e.g. 0..200).
    #[arg(long)]
    random_seeds: Option<String>,
    /// Step budget per randomized run.
    #[arg(long, default_value_t = 100_000)]
    max_steps: u64,
    #[arg(long)]
    allow_assumption_violations: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Trace JSON Lines file to audit.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Seed recorded in the report for witness replay.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    allow_assumption_violations: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario with one seed and check the trace.
    Run(RunArgs),
    /// Run a scenario across a seed range.
    Sweep(SweepArgs),
    /// Explore message interleavings for safety violations.
    Explore(ExploreArgs),
    /// Audit an existing trace file.
    Check(CheckArgs),
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Explore(args) => cmd_explore(args),
        Command::Check(args) => cmd_check(args),
    }
}

fn load(path: &PathBuf, allow_violations: bool) -> Result<Scenario, String> {
    let mut scenario = Scenario::load(path).map_err(|e| e.to_string())?;
    if allow_violations && !scenario.allow_assumption_violations {
        scenario.allow_assumption_violations = true;
        scenario.validate().map_err(|e| e.to_string())?;
    }
    Ok(scenario)
}

fn parse_range(text: &str) -> Result<(u64, u64), String> {
    let (a, b) = text
        .split_once("..")
        .ok_or_else(|| format!("bad range {text:?}, expected A..B"))?;
    let start: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
    let end: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
    if start >= end {
        return Err(format!("empty seed range {text:?}"));
    }
    Ok((start, end))
}

struct RunSummary {
    outcome: RunOutcome,
    epochs: u64,
    checkpoints: usize,
    transfers: usize,
}

fn summarize(trace: &[TraceRecord], outcome: RunOutcome) -> RunSummary {
    let mut epochs = 0u64;
    let mut checkpoints = BTreeSet::new();
    let mut transfers = BTreeSet::new();
    for r in trace {
        for e in &r.effects {
            match e {
                Effect::Installed { new_epoch, .. } => epochs = epochs.max(*new_epoch),
                Effect::Delivered { epoch, slot, .. } => {
                    checkpoints.insert((*epoch, *slot));
                }
                Effect::Executed { sender, nonce, .. } => {
                    transfers.insert((sender.clone(), *nonce));
                }
                _ => {}
            }
        }
    }
    RunSummary { outcome, epochs, checkpoints: checkpoints.len(), transfers: transfers.len() }
}

fn outcome_name(outcome: RunOutcome) -> &'static str {
    match outcome {
        RunOutcome::GoalsMet => "goals-met",
        RunOutcome::Quiesced => "quiesced",
        RunOutcome::BudgetExhausted => "budget-exhausted",
        RunOutcome::ViolationHalted => "violation",
    }
}

fn print_report(report: &Report) {
    for v in &report.verdicts {
        let status = match v.status {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::ExpectedFail => "expected-fail",
        };
        match &v.witness {
            Some(w) if v.status != Status::Pass => {
                println!(
                    "check {property}={status} witness-step={step} node={node} ({desc})",
                    property = v.property,
                    step = w.step,
                    node = w.node,
                    desc = w.description
                );
            }
            _ => println!("check {}={status}", v.property),
        }
    }
}

/// Runs one seed; returns (pass, budget_exhausted).
fn run_one(
    scenario: &Scenario,
    seed: u64,
    max_steps: u64,
    check: CheckMode,
    trace_out: Option<&PathBuf>,
    report_out: Option<&PathBuf>,
    verbose: bool,
) -> Result<(bool, bool), String> {
    let mut sim = Simulation::new(scenario.clone(), seed);
    sim.check_online = check != CheckMode::Offline;
    let outcome = sim.run(max_steps);
    let summary = summarize(&sim.trace, outcome);

    if let Some(path) = trace_out {
        std::fs::write(path, sim.trace_jsonl()).map_err(|e| e.to_string())?;
    }

    let mut pass = true;
    if sim.check_online {
        if let Some(v) = &sim.violation {
            pass = false;
            println!(
                "online-violation property={} step={} node={} ({})",
                v.property, v.step, v.node, v.description
            );
        }
    }
    let mut budget = outcome == RunOutcome::BudgetExhausted;
    if check != CheckMode::Online {
        let checker = Checker::new(scenario.clone());
        let report = checker.check_all(&sim.trace, Some(seed)).map_err(|e| e.to_string())?;
        if verbose {
            print_report(&report);
        }
        if !report.all_pass() {
            pass = false;
        }
        if let Some(path) = report_out {
            std::fs::write(path, report.to_json()).map_err(|e| e.to_string())?;
        }
    }
    if verbose {
        println!(
            "scenario={} seed={seed} outcome={} steps={} time={} epochs-installed={} \
             checkpoints-delivered={} transfers-executed={}",
            scenario.name,
            outcome_name(summary.outcome),
            sim.steps,
            sim.now,
            summary.epochs,
            summary.checkpoints,
            summary.transfers
        );
    }
    // A run that met its goals used exactly as much budget as it needed.
    if outcome == RunOutcome::GoalsMet {
        budget = false;
    }
    Ok((pass, budget))
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, String> {
    let scenario = load(&args.scenario, args.allow_assumption_violations)?;
    let seed = args.seed.unwrap_or(scenario.network.default_seed);
    let (pass, budget) = run_one(
        &scenario,
        seed,
        args.max_steps,
        args.check,
        args.trace_out.as_ref(),
        args.report_out.as_ref(),
        true,
    )?;
    let code = if !pass {
        1
    } else if budget {
        3
    } else {
        0
    };
    println!("result={}", if pass { "pass" } else { "fail" });
    Ok(ExitCode::from(code))
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode, String> {
    let scenario = load(&args.scenario, args.allow_assumption_violations)?;
    let (start, end) = parse_range(&args.seeds)?;
    let mut failures = Vec::new();
    let mut budget_hits = 0u64;
    for seed in start..end {
        let (pass, budget) =
            run_one(&scenario, seed, args.max_steps, args.check, None, None, false)?;
        if !pass {
            println!("seed={seed} result=fail");
            failures.push(seed);
        } else if budget {
            println!("seed={seed} result=budget-exhausted");
            budget_hits += 1;
        }
    }
    let total = end - start;
    println!(
        "sweep scenario={} seeds={}..{} pass={}/{} failures={:?}",
        scenario.name,
        start,
        end,
        total - failures.len() as u64 - budget_hits,
        total,
        failures
    );
    let code = if !failures.is_empty() {
        1
    } else if budget_hits > 0 {
        3
    } else {
        0
    };
    Ok(ExitCode::from(code))
}

fn cmd_explore(args: ExploreArgs) -> Result<ExitCode, String> {
    let scenario = load(&args.scenario, args.allow_assumption_violations)?;
    let mode = match &args.random_seeds {
        Some(range) => {
            let (seed_start, seed_end) = parse_range(range)?;
            ExploreMode::Randomized { seed_start, seed_end, max_steps: args.max_steps }
        }
        None => {
            let client_actions: usize = scenario
                .clients
                .iter()
                .map(|c| c.transfers.len().max(usize::from(c.equivocate.is_some())))
                .sum::<usize>()
                + scenario.reconfigs.len();
            if scenario.validators.len() > 5 || client_actions > 4 {
                return Err(format!(
                    "scenario too large for exhaustive exploration \
                     ({} validators, {} client actions; limits are 5 and 4); \
                     use --random-seeds instead",
                    scenario.validators.len(),
                    client_actions
                ));
            }
            ExploreMode::Exhaustive { depth: args.depth, max_states: args.max_states }
        }
    };
    let report = explore_interleavings(&scenario, mode);
    println!(
        "explore scenario={} states-explored={} dedup-hits={} budget-exhausted={}",
        scenario.name, report.states_explored, report.dedup_hits, report.budget_exhausted
    );
    if let Some(v) = &report.violation {
        println!("counterexample property={} ({})", v.property, v.description);
        if let Some(seed) = v.seed {
            println!("counterexample seed={seed} step={}", v.step);
        }
        for (i, action) in v.schedule.iter().enumerate() {
            println!("  {i:>3}: {action}");
        }
        println!("verdict=violation");
        return Ok(ExitCode::from(1));
    }
    println!("verdict=clean");
    if report.budget_exhausted {
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::from(0))
}

fn cmd_check(args: CheckArgs) -> Result<ExitCode, String> {
    let scenario = load(&args.scenario, args.allow_assumption_violations)?;
    let text = std::fs::read_to_string(&args.trace).map_err(|e| e.to_string())?;
    let trace = pdcc::trace::from_jsonl(&text).map_err(|e| format!("malformed trace: {e}"))?;
    let checker = Checker::new(scenario);
    let report = checker.check_all(&trace, args.seed).map_err(|e| e.to_string())?;
    print_report(&report);
    if let Some(path) = args.report_out {
        std::fs::write(path, report.to_json()).map_err(|e| e.to_string())?;
    }
    let pass = report.all_pass();
    println!("result={}", if pass { "pass" } else { "fail" });
    Ok(ExitCode::from(u8::from(!pass)))
}
