//! Four agents exchanging corners of a square are optimized jointly,
//! post-checked, and the solver trace is written to a CSV.

use std::fs::File;
use std::io::BufWriter;

use group_planner::error::Result;
use group_planner::grid_map::{GridMap3D, Vec3};
use group_planner::joint_opt::{plan_checked, write_trace_csv, AgentSpec, GroupPlanProblem, RetryOutcome};
use group_planner::minco::{BoundaryState, MincoTrajectory};
use group_planner::penalty::{PenaltyWeights, Term};

fn main() -> Result<()> {
    let mut map = GridMap3D::with_size(Vec3::new(-4.0, -4.0, 0.0), Vec3::new(8.0, 8.0, 3.0), 0.1)?;
    map.add_pillar((0.0, 0.0), 0.3);
    map.build_distance_field();

    let corners = [(-2.5, -2.5), (2.5, -2.5), (2.5, 2.5), (-2.5, 2.5)];
    let mut agents = Vec::new();
    let mut initial = Vec::new();
    for (id, &(x, y)) in corners.iter().enumerate() {
        let a = Vec3::new(x, y, 1.5);
        let b = Vec3::new(-x, -y, 1.5);
        // start on a slight detour so nobody begins inside the pillar
        let side = Vec3::new(-y, x, 0.0).normalize() * 0.8;
        let q = vec![a.lerp(&b, 0.33) + side, a.lerp(&b, 0.66) + side];
        initial.push(MincoTrajectory::jerk(BoundaryState::at_rest(a), BoundaryState::at_rest(b), q, vec![1.4, 1.4, 1.4])?);
        agents.push(AgentSpec { id, head: BoundaryState::at_rest(a), tail: BoundaryState::at_rest(b) });
    }
    let problem = GroupPlanProblem::new(agents, initial, PenaltyWeights::default(), &map);
    let outcome = plan_checked(&problem)?;

    if let Some(solve) = &outcome.solve {
        println!("{} iterations, {} evaluations, converged {}", solve.iterations, solve.evaluations, solve.converged);
        for t in Term::ALL {
            println!("  {:<12} {:.4}", t.name(), solve.breakdown.get(t));
        }
        std::fs::create_dir_all("out")?;
        write_trace_csv(BufWriter::new(File::create("out/solver_trace.csv")?), &solve.trace)?;
        println!("solver trace written to out/solver_trace.csv");
    }
    match &outcome.result {
        RetryOutcome::Safe { trajectories, retries, report, .. } => {
            println!("safe after {retries} retries");
            let obstacle = report.min_obstacle_distance.iter().copied().fold(f64::INFINITY, f64::min);
            let pair = report.min_pair_distance.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
            println!("min obstacle distance {obstacle:.3} m, min pair distance {pair:.3} m");
            for (k, tr) in trajectories.iter().enumerate() {
                println!("agent {k}: {:.2} s over {} pieces", tr.total_duration(), tr.piece_count());
            }
        }
        RetryOutcome::EmergencyStop { retries, report } => {
            println!("emergency stop after {retries} retries: {:?}", report.violations);
        }
    }
    Ok(())
}
