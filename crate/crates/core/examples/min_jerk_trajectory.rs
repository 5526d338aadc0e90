//! Constructs minimum-jerk trajectories through waypoints, prints their
//! coefficients and control effort, and writes a sampled CSV.

use std::fs::File;
use std::io::BufWriter;

use group_planner::error::Result;
use group_planner::grid_map::Vec3;
use group_planner::minco::{BoundaryState, MincoTrajectory};
use group_planner::penalty::control_effort;

fn main() -> Result<()> {
    // rest to rest over one metre in one second: the classic quintic
    let unit = MincoTrajectory::jerk(BoundaryState::at_rest(Vec3::zeros()), BoundaryState::at_rest(Vec3::x()), vec![], vec![1.0])?;
    println!("single piece:\n{}", unit.coefficient_dump());
    println!("control effort {:.6} (closed form 720)", control_effort(&unit).value);

    let head = BoundaryState { position: Vec3::new(0.0, 0.0, 1.0), velocity: Vec3::new(0.5, 0.0, 0.0), acceleration: Vec3::zeros() };
    let tail = BoundaryState::at_rest(Vec3::new(4.0, 2.0, 1.5));
    let waypoints = vec![Vec3::new(1.0, 1.0, 1.2), Vec3::new(2.5, 0.5, 1.4), Vec3::new(3.5, 1.8, 1.5)];
    let traj = MincoTrajectory::jerk(head, tail, waypoints, vec![1.0, 1.2, 0.9, 0.8])?;
    println!("{} pieces, {:.2} s, effort {:.3}", traj.piece_count(), traj.total_duration(), control_effort(&traj).value);
    for t in [0.0, 1.0, 2.2, 3.1, traj.total_duration()] {
        let s = traj.state(t);
        println!("t={t:.2} p={:.3?} v={:.3?}", s.position.as_slice(), s.velocity.as_slice());
    }

    std::fs::create_dir_all("out")?;
    traj.write_samples_csv(BufWriter::new(File::create("out/min_jerk.csv")?), 50.0, 0.0)?;
    println!("samples written to out/min_jerk.csv");
    Ok(())
}
