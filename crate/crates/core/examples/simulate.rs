//! Runs a built-in scenario through the full replanning loop and writes
//! traces and metrics. Usage: `simulate [circle|gate|sharing|traffic] [seed]`.

use group_planner::error::Result;
use group_planner::sim::run;
use group_planner::sim::scenario::{air_traffic, circle_exchange, map_sharing, narrow_gate, straight_line};

fn main() -> Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "circle".into());
    let seed = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scenario = match name.as_str() {
        "circle" => circle_exchange(8, 15.0, seed),
        "gate" => narrow_gate(seed),
        "sharing" => map_sharing(true),
        "traffic" => air_traffic(25, 3, seed),
        _ => straight_line(),
    };
    let result = run(&scenario)?;
    let m = &result.metrics;
    println!("{} seed {}: success {} {:?}", m.scenario, m.seed, m.success, m.failure);
    println!("{:>5} {:>10} {:>10} {:>10} {:>8}", "agent", "time (s)", "dist (m)", "int(j^2)", "replans");
    for a in &m.agents {
        println!(
            "{:>5} {:>10.2} {:>10.2} {:>10.2} {:>8}",
            a.id,
            a.flight_time.unwrap_or(f64::NAN),
            a.flight_distance,
            a.jerk_integral,
            a.replans
        );
    }
    println!(
        "mean time {:.2} s, distance {:.2} m, int(j^2) {:.2}; groups formed {}",
        m.mean_flight_time(),
        m.mean_flight_distance(),
        m.mean_jerk_integral(),
        m.group_activations
    );
    let dir = format!("out/{}_{}", m.scenario, m.seed);
    result.write_outputs(&dir)?;
    println!("traces and summary in {dir}");
    Ok(())
}
