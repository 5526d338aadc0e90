//! Command-line front end: simulation runs, the MAPF timing sweep and the
//! gradient check.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use group_planner::error::Result;
use group_planner::gradcheck::{run_gradcheck, GradcheckConfig};
use group_planner::sim::bench::{benchmark_emapf, write_bench_csv, BenchConfig};
use group_planner::sim::scenario::{self, Scenario};

#[derive(Parser)]
#[command(name = "group-planner", version, about = "Group planning for aerial robot teams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Random seed; overrides the one in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for traces, summaries and tables.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write traces and metrics.
    Run {
        /// Built-in scenario, used when no --config is given.
        #[arg(long, value_enum, default_value = "circle")]
        scenario: Builtin,
    },
    /// Time the multi-agent path search over a parameter sweep.
    BenchMapf,
    /// Compare every objective gradient with finite differences.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum Builtin {
    Circle,
    Gate,
    Sharing,
    NoSharing,
    Straight,
    Traffic,
}

impl Builtin {
    fn build(self, seed: u64) -> Scenario {
        match self {
            Builtin::Circle => scenario::circle_exchange(8, 15.0, seed),
            Builtin::Gate => scenario::narrow_gate(seed),
            Builtin::Sharing => scenario::map_sharing(true),
            Builtin::NoSharing => scenario::map_sharing(false),
            Builtin::Straight => scenario::straight_line(),
            Builtin::Traffic => scenario::air_traffic(25, 3, seed),
        }
    }
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn run(cli: &Cli, builtin: Builtin) -> Result<bool> {
    let mut scenario = match &cli.config {
        Some(p) => Scenario::load(p)?,
        None => builtin.build(cli.seed.unwrap_or(0)),
    };
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    let result = group_planner::sim::run(&scenario)?;
    result.write_outputs(&cli.out_dir)?;
    let m = &result.metrics;
    println!("scenario {} seed {}", m.scenario, m.seed);
    println!("success {}{}", m.success, m.failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default());
    println!(
        "mean flight time {:.3} s, distance {:.3} m, int(j^2) {:.3}",
        m.mean_flight_time(),
        m.mean_flight_distance(),
        m.mean_jerk_integral()
    );
    println!(
        "group activations {}, min pair distance {:?}, min obstacle distance {:?}",
        m.group_activations, m.min_pair_distance, m.min_obstacle_distance
    );
    println!("outputs in {}", cli.out_dir.display());
    Ok(m.success)
}

fn bench(cli: &Cli) -> Result<bool> {
    let mut cfg: BenchConfig = load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    let rows = benchmark_emapf(&cfg)?;
    std::fs::create_dir_all(&cli.out_dir)?;
    let path = cli.out_dir.join("bench_mapf.csv");
    write_bench_csv(BufWriter::new(File::create(&path)?), &rows)?;
    write_bench_csv(std::io::stdout().lock(), &rows)?;
    for r in rows.iter().filter(|r| r.over_limit) {
        println!("over real-time limit: {} agents, spacing {}, volume {}", r.agents, r.spacing, r.volume);
    }
    println!("table in {}", path.display());
    Ok(rows.iter().all(|r| r.failures == 0))
}

fn gradcheck(cli: &Cli) -> Result<bool> {
    let mut cfg: GradcheckConfig = load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.summary());
    println!("tolerance {:.1e}, {:.2} s", report.tolerance, report.elapsed.as_secs_f64());
    std::fs::create_dir_all(&cli.out_dir)?;
    std::fs::write(cli.out_dir.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { scenario } => run(&cli, scenario),
        Command::BenchMapf => bench(&cli),
        Command::Gradcheck => gradcheck(&cli),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
