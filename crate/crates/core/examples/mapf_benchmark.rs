//! A small search-time sweep over agent count and obstacle density.

use group_planner::error::Result;
use group_planner::sim::bench::{benchmark_emapf, write_bench_csv, BenchConfig};

fn main() -> Result<()> {
    let cfg = BenchConfig { volumes: vec![[8.0, 8.0, 4.0]], seeds: 5, ..BenchConfig::default() };
    let rows = benchmark_emapf(&cfg)?;
    write_bench_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}
