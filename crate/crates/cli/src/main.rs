use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use chainload::harness::{self, Suite};
use chainload::output;
use chainload::scenario::Scenario;
use chainload::{ExperimentReport, Strategy};

#[derive(Parser)]
#[command(name = "chainload", version, about = "Run workflow-offloading scenarios over a simulated opportunistic network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run(RunArgs),
    /// Run a suite: scenarios × clients × strategies × seeds.
    Suite(SuiteArgs),
    /// Re-aggregate saved reports into tables.
    Report(DirArgs),
    /// Write long-format, figure-ready CSVs from saved reports.
    PlotData(DirArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Override the assignment strategy.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Workflow description file replacing the scenario's own.
    #[arg(short, long)]
    workflow: Option<PathBuf>,
    /// Override the number of clients.
    #[arg(long)]
    clients: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SuiteArgs {
    suite: PathBuf,
    /// Run this many seeds, starting at `--seed` (or 1).
    #[arg(long)]
    seeds: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DirArgs {
    /// Directory holding saved reports (or its `reports/` subdirectory).
    input: PathBuf,
    /// Output directory; defaults to the input directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Suite(a) => suite(a),
        Command::Report(a) => report(a),
        Command::PlotData(a) => plot_data(a),
    }
}

fn run(a: RunArgs) -> Result<()> {
    let mut s = Scenario::from_file(&a.scenario)?;
    if let Some(w) = &a.workflow {
        let text = std::fs::read_to_string(w).with_context(|| format!("reading workflow {}", w.display()))?;
        s = s.with_workflow_text(text);
    }
    if let Some(c) = a.clients {
        s = s.with_clients(c);
    }
    if let Some(st) = a.common.strategy {
        s = s.with_strategy(st);
    }
    if let Some(seed) = a.common.seed {
        s = s.with_seed(seed);
    }
    s.validate()?;
    let out = a.common.out.unwrap_or_else(|| Path::new("out").join(&s.config.name));
    let r = harness::run_scenario(&s)?;
    let reports = vec![r];
    let files = output::suite_files(&s.config.name, &reports, &[]);
    files.write_to(&out)?;
    print_summary(&reports);
    println!("wrote {} files to {}", files.files.len(), out.display());
    Ok(())
}

fn suite(a: SuiteArgs) -> Result<()> {
    let mut suite = Suite::from_file(&a.suite)?;
    if let Some(st) = a.common.strategy {
        suite.strategies = vec![st];
    }
    match (a.common.seed, a.seeds) {
        (Some(start), Some(n)) => suite.seeds = (start..start + n).collect(),
        (None, Some(n)) => suite.seeds = (1..1 + n).collect(),
        (Some(seed), None) => suite.seeds = vec![seed],
        (None, None) => {}
    }
    let out = a.common.out.unwrap_or_else(|| Path::new("out").join(&suite.name));
    // fail on an unwritable directory before spending time on runs
    output::FileSet::default().write_to(&out)?;
    let jobs = suite.jobs();
    eprintln!("running {} jobs", jobs.len());
    let outcome = harness::run_suite(&suite.name, &jobs);
    let files = output::suite_files(&suite.name, &outcome.reports, &outcome.failures);
    files.write_to(&out)?;
    print_summary(&outcome.reports);
    for f in &outcome.failures {
        eprintln!("failed: {} clients={} {} seed={}: {}", f.scenario, f.clients, f.strategy, f.seed, f.message);
    }
    println!("suite hash {}", harness::suite_hash(&outcome.reports));
    println!("wrote {} files to {}", files.files.len(), out.display());
    Ok(())
}

fn load(input: &Path) -> Result<Vec<ExperimentReport>> {
    let reports = output::load_reports(input)?;
    if reports.is_empty() {
        bail!("no reports found in {}", input.display());
    }
    Ok(reports)
}

fn report(a: DirArgs) -> Result<()> {
    let reports = load(&a.input)?;
    let out = a.out.unwrap_or(a.input);
    let files = output::tables(&reports);
    files.write_to(&out)?;
    print_summary(&reports);
    println!("wrote {} files to {}", files.files.len(), out.display());
    Ok(())
}

fn plot_data(a: DirArgs) -> Result<()> {
    let reports = load(&a.input)?;
    let out = a.out.unwrap_or(a.input);
    let files = output::plot_files(&reports);
    files.write_to(&out)?;
    println!("wrote {} files to {}", files.files.len(), out.display());
    Ok(())
}

fn print_summary(reports: &[ExperimentReport]) {
    let states = harness::final_states(reports);
    println!(
        "{:<20} {:>7} {:<8} {:>5} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "scenario", "clients", "strategy", "runs", "success", "exec_s", "runtime_s", "transm_s", "return_s", "total_s"
    );
    for (p, s) in harness::phase_summary(reports).iter().zip(&states) {
        println!(
            "{:<20} {:>7} {:<8} {:>5} {:>7.1}% {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
            p.key.scenario,
            p.key.clients,
            p.key.strategy.name(),
            p.runs,
            100.0 * s.success_rate(),
            p.execution.mean,
            p.runtime.mean,
            p.transmission.mean,
            p.return_leg.mean,
            p.total.mean
        );
    }
}
