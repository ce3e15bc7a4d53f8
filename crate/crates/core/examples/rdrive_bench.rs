//! Experiment runner.
//!
//! ```text
//! cargo run --release --example rdrive-bench -- achieved-cost --seed 2021 --out results
//! ```
//!
//! Scenarios: lower-bounds, achieved-cost, code-rate, inter-edge, resilience, all.
//! Each writes `<scenario>.csv` under `--out` and prints a short summary.

use clap::{Parser, ValueEnum};
use rdrive::harness::{self, InterEdgeSpec, ResilienceSpec, ScenarioSpec, SpreadReading};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scenario {
    LowerBounds,
    AchievedCost,
    CodeRate,
    InterEdge,
    Resilience,
    All,
}

#[derive(Debug, Parser)]
#[command(name = "rdrive-bench", about = "Run reproducible storage experiments and write CSV")]
struct Args {
    scenario: Scenario,
    #[arg(long, default_value_t = 2021)]
    seed: u64,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    runs: usize,
    /// Read the second parameter of each device distribution as a standard
    /// deviation instead of a variance.
    #[arg(long)]
    stddev: bool,
    /// Mule dwell in ticks for inter-edge.
    #[arg(long, default_value_t = 60)]
    dwell: u64,
    /// Mule period in ticks for inter-edge.
    #[arg(long, default_value_t = 240)]
    period: u64,
}

fn write(out: &Path, name: &str, csv: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("{name}.csv"));
    std::fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(args: &Args, scenario: Scenario) -> Result<(), Box<dyn std::error::Error>> {
    let spec = ScenarioSpec {
        runs: args.runs,
        seed: args.seed,
        spread: if args.stddev { SpreadReading::StdDev } else { SpreadReading::Variance },
        ..ScenarioSpec::default()
    };
    let started = Instant::now();
    match scenario {
        Scenario::LowerBounds => {
            let rows = harness::run_lower_bounds(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 30);
            write(&args.out, "lower-bounds", &harness::lower_bounds_csv(&rows))?;
        }
        Scenario::AchievedCost => {
            let rows = harness::run_achieved_cost(&spec)?;
            for r in &rows {
                println!(
                    "wa={:.1} NS={:2} cost={:.4} k={:.2} n={:.2} infeasible={}",
                    r.weight, r.network_size, r.mean_cost, r.mean_k, r.mean_n, r.infeasible
                );
            }
            write(&args.out, "achieved-cost", &harness::achieved_cost_csv(&rows))?;
        }
        Scenario::CodeRate => {
            let sweep_spec = ScenarioSpec { weights: (0..=10).map(|i| i as f64 / 10.0).collect(), ..spec };
            let sweep = harness::run_code_rate_sweep(&sweep_spec)?;
            println!("monotonicity violations: {}", sweep.monotonicity_violations.len());
            write(&args.out, "code-rate", &harness::code_rate_csv(&sweep.rows))?;
        }
        Scenario::InterEdge => {
            let ie = InterEdgeSpec { seed: args.seed, dwell: args.dwell, period: args.period, ..InterEdgeSpec::default() };
            let report = harness::run_inter_edge(&ie)?;
            println!(
                "(k,n)=({},{}) intra-immediate={} via-mule={} ordered={} get={:?} identical={}",
                report.k,
                report.n,
                report.intra_edge_immediate(),
                report.cross_edge_only_via_mule(),
                report.cross_edge_ordered(),
                report.get_result,
                report.round_trip_identical
            );
            write(&args.out, "inter-edge", &report.csv())?;
        }
        Scenario::Resilience => {
            let mut csv = String::new();
            for (k, n) in [(1, 2), (2, 3), (2, 4), (3, 5), (4, 6)] {
                let rs = ResilienceSpec { k, n, file_bytes: 20_000, block_size: 8192, seed: args.seed };
                let rows = harness::run_resilience_sweep(&rs)?;
                let text = harness::resilience_csv(&rs, &rows);
                csv.push_str(if csv.is_empty() { &text } else { text.split_once('\n').map_or("", |x| x.1) });
            }
            write(&args.out, "resilience", &csv)?;
        }
        Scenario::All => {
            for s in [
                Scenario::LowerBounds,
                Scenario::AchievedCost,
                Scenario::CodeRate,
                Scenario::InterEdge,
                Scenario::Resilience,
            ] {
                run(args, s)?;
            }
            return Ok(());
        }
    }
    println!("{scenario:?} took {:.2?}", started.elapsed());
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args, args.scenario) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rdrive-bench: {e}");
            ExitCode::FAILURE
        }
    }
}
