use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use pullshuffle::store::Journal;
use pullshuffle_sim::pipeline::ACCESS_TABLE;
use pullshuffle_sim::report::ScenarioReport;
use pullshuffle_sim::spec::{FaultPlan, PipelineId, ProcessorSpec};
use pullshuffle_sim::{Simulation, Verdict};

#[derive(Parser)]
#[command(name = "pullshuffle", version, about = "Run and check shuffle pipelines on a simulated cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its report.
    Run(ScenarioArgs),
    /// Run the built-in access-log pipeline and show the resulting tallies.
    Demo {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Print the demo spec as JSON and exit.
        #[arg(long)]
        print_spec: bool,
        /// Number of tally rows to show.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Run one scenario and exit with status 1 unless it passes.
    Verify(ScenarioArgs),
    /// Run many seeds and report the pass rate.
    Soak {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Fault plan shared by every seed; without it each seed gets a random plan.
        #[arg(long)]
        faults: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Faults per random plan.
        #[arg(long, default_value_t = 4)]
        random_faults: usize,
        /// Virtual time span over which random faults are placed.
        #[arg(long, default_value_t = 2000)]
        horizon_ms: u64,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Processor spec (JSON). Defaults to the built-in access-log demo.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Fault plan (JSON). Defaults to no faults.
    #[arg(long)]
    faults: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the store journal to this file.
    #[arg(long)]
    journal: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn demo_spec() -> ProcessorSpec {
    let mut spec = ProcessorSpec::new(PipelineId::AccessTally, 3, 2);
    spec.input.rows_per_partition = 2000;
    spec.input.key_cardinality = 50;
    spec
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_spec(path: Option<&Path>) -> Result<ProcessorSpec> {
    match path {
        Some(p) => ProcessorSpec::from_json(&read(p)?).with_context(|| format!("invalid spec {}", p.display())),
        None => Ok(demo_spec()),
    }
}

fn load_plan(path: Option<&Path>, spec: &ProcessorSpec) -> Result<FaultPlan> {
    match path {
        Some(p) => FaultPlan::from_json(&read(p)?, spec).with_context(|| format!("invalid fault plan {}", p.display())),
        None => Ok(FaultPlan::none()),
    }
}

fn simulate(args: &ScenarioArgs, spec: ProcessorSpec) -> Result<(Simulation, ScenarioReport)> {
    let plan = load_plan(args.faults.as_deref(), &spec)?;
    let journal = match &args.journal {
        Some(p) => Journal::to_file(p).with_context(|| format!("cannot create journal {}", p.display()))?,
        None => Journal::counting(),
    };
    let mut sim = Simulation::with_journal(spec, plan, args.seed, journal)?;
    sim.run();
    sim.store().flush_journal().context("cannot flush journal")?;
    let report = ScenarioReport::from_simulation(&sim)?;
    Ok((sim, report))
}

fn emit(args: &ScenarioArgs, report: &ScenarioReport) -> Result<()> {
    let text = report.to_text();
    match &args.report {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write report {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn show_tallies(sim: &Simulation, top: usize) -> Result<()> {
    let mut rows = sim.store().dump_sorted(ACCESS_TABLE)?;
    rows.sort_by_key(|r| std::cmp::Reverse(r.get(2).as_i64().unwrap_or(0)));
    println!("{:<12} {:<10} {:>8} {:>14}", "user", "cluster", "hits", "last_access");
    for r in rows.iter().take(top) {
        let text = |pos: usize| r.get(pos).as_str().unwrap_or("-").to_string();
        let int = |pos: usize| r.get(pos).as_i64().unwrap_or(0);
        println!("{:<12} {:<10} {:>8} {:>14}", text(0), text(1), int(2), int(3));
    }
    println!("({} user/cluster pairs)", rows.len());
    Ok(())
}

fn soak(spec: ProcessorSpec, faults: Option<&Path>, seeds: std::ops::Range<u64>, random_faults: usize, horizon_ms: u64) -> Result<bool> {
    let fixed = faults.map(|p| load_plan(Some(p), &spec)).transpose()?;
    let total = seeds.end - seeds.start;
    let mut passed = 0;
    for seed in seeds {
        let plan = fixed.clone().unwrap_or_else(|| FaultPlan::random(&spec, seed, horizon_ms, random_faults));
        let report = pullshuffle_sim::run_scenario(spec.clone(), plan, seed)?;
        if report.verdict == Verdict::Pass {
            passed += 1;
        } else {
            println!(
                "seed {seed}: FAIL duplicates={} losses={} oracle_match={} status={:?}",
                report.duplicates, report.losses, report.oracle_match, report.status
            );
        }
    }
    println!("pass rate: {passed}/{total} ({:.1}%)", if total == 0 { 100.0 } else { 100.0 * passed as f64 / total as f64 });
    Ok(passed == total)
}

fn verdict(report: &ScenarioReport) -> &'static str {
    match report.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let spec = load_spec(args.spec.as_deref())?;
            let (_, report) = simulate(&args, spec)?;
            emit(&args, &report)?;
            Ok(true)
        }
        Command::Verify(args) => {
            let spec = load_spec(args.spec.as_deref())?;
            let (_, report) = simulate(&args, spec)?;
            emit(&args, &report)?;
            eprintln!("verdict: {}", verdict(&report));
            Ok(report.verdict == Verdict::Pass)
        }
        Command::Demo { scenario, print_spec, top } => {
            let spec = load_spec(scenario.spec.as_deref())?;
            if print_spec {
                println!("{}", spec.to_json());
                return Ok(true);
            }
            anyhow::ensure!(spec.pipeline == PipelineId::AccessTally, "demo needs the access_tally pipeline");
            let (sim, report) = simulate(&scenario, spec)?;
            show_tallies(&sim, top)?;
            if scenario.report.is_some() {
                emit(&scenario, &report)?;
            }
            println!(
                "verdict {}: {} rows, write amplification {:.4}",
                verdict(&report), report.input_rows, report.write_amplification
            );
            Ok(true)
        }
        Command::Soak { spec, faults, seeds, first_seed, random_faults, horizon_ms } => {
            let spec = load_spec(spec.as_deref())?;
            soak(spec, faults.as_deref(), first_seed..first_seed + seeds, random_faults, horizon_ms)
        }
    }
}
