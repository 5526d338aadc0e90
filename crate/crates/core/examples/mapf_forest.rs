//! Eight agents swap sides of a circle through a pillar forest with the
//! bounded-suboptimal multi-agent search, and the paths go to a CSV.

use std::fs::File;
use std::io::BufWriter;

use group_planner::error::Result;
use group_planner::mapf::{count_conflicts, plan, write_paths_csv, MapfConfig};
use group_planner::sim::bench::{bench_instance, BenchConfig};

fn main() -> Result<()> {
    let bench = BenchConfig::default();
    let inst = bench_instance(8, 0.5, [12.0, 12.0, 8.0], 7, &bench)?;
    let cfg = MapfConfig { time_budget: None, ..MapfConfig::default() };
    let sol = plan(&inst.starts, &inst.goals, &inst.map, &cfg)?;

    println!("solved in {:?}", sol.stats.elapsed);
    println!("total cost {:.3}, lower bound {:.3}, ratio {:.3} (omega {})", sol.cost, sol.lower_bound, sol.cost / sol.lower_bound, cfg.omega);
    println!(
        "high-level nodes expanded {}, low-level expansions {}, conflicts {}",
        sol.stats.high_level_expanded,
        sol.stats.low_level_expanded,
        count_conflicts(&sol.paths)
    );
    for (k, p) in sol.paths.iter().enumerate() {
        println!("agent {k}: {} steps, cost {:.3}", p.len(), p.cost);
    }
    std::fs::create_dir_all("out")?;
    write_paths_csv(BufWriter::new(File::create("out/mapf_paths.csv")?), &sol.paths)?;
    println!("paths written to out/mapf_paths.csv");
    Ok(())
}
