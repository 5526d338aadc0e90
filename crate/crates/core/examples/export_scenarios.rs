//! Writes the built-in scenarios and default sweep configs as JSON files
//! that the command-line tool accepts with `--config`.

use group_planner::error::Result;
use group_planner::gradcheck::GradcheckConfig;
use group_planner::sim::bench::BenchConfig;
use group_planner::sim::scenario::{air_traffic, circle_exchange, map_sharing, narrow_gate, straight_line};

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "scenarios".into());
    std::fs::create_dir_all(&dir)?;
    let scenarios = [
        ("circle_exchange.json", circle_exchange(8, 15.0, 0)),
        ("narrow_gate.json", narrow_gate(0)),
        ("map_sharing_on.json", map_sharing(true)),
        ("map_sharing_off.json", map_sharing(false)),
        ("straight_line.json", straight_line()),
        ("air_traffic.json", air_traffic(25, 3, 1)),
    ];
    for (file, s) in scenarios {
        s.save(format!("{dir}/{file}"))?;
        println!("{dir}/{file}");
    }
    std::fs::write(format!("{dir}/bench_mapf.json"), serde_json::to_string_pretty(&BenchConfig::default())?)?;
    std::fs::write(format!("{dir}/gradcheck.json"), serde_json::to_string_pretty(&GradcheckConfig::default())?)?;
    println!("{dir}/bench_mapf.json\n{dir}/gradcheck.json");
    Ok(())
}
