//! Evaluates every objective term for a trajectory that grazes a pillar
//! and crosses a second agent, and shows how the weights scale them.

use group_planner::error::Result;
use group_planner::grid_map::{GridMap3D, Vec3};
use group_planner::joint_opt::{joint_objective, AgentSpec, GroupPlanProblem};
use group_planner::minco::{BoundaryState, MincoTrajectory};
use group_planner::penalty::{PenaltyWeights, Term};

fn main() -> Result<()> {
    let mut map = GridMap3D::with_size(Vec3::zeros(), Vec3::new(8.0, 6.0, 3.0), 0.1)?;
    map.add_pillar((4.0, 3.2), 0.25);
    map.build_distance_field();

    let rest = BoundaryState::at_rest;
    let legs = [
        (Vec3::new(1.0, 3.0, 1.5), Vec3::new(7.0, 3.0, 1.5)),
        (Vec3::new(4.0, 0.5, 1.5), Vec3::new(4.0, 5.5, 1.5)),
    ];
    let mut agents = Vec::new();
    let mut initial = Vec::new();
    for (id, (a, b)) in legs.into_iter().enumerate() {
        let q = vec![a.lerp(&b, 1.0 / 3.0), a.lerp(&b, 2.0 / 3.0)];
        initial.push(MincoTrajectory::jerk(rest(a), rest(b), q, vec![1.8, 1.8, 1.8])?);
        agents.push(AgentSpec { id, head: rest(a), tail: rest(b) });
    }
    let problem = GroupPlanProblem::new(agents, initial, PenaltyWeights::default(), &map);
    let x = problem.initial_vector();
    let mut grad = x.clone();
    let (total, breakdown) = joint_objective(&problem, &x, &mut grad);

    println!("{:<12} {:>14}", "term", "weighted value");
    for t in Term::ALL {
        println!("{:<12} {:>14.4}", t.name(), breakdown.get(t));
    }
    println!("{:<12} {:>14.4}", "total", total);
    println!("gradient: {} entries, max |g| = {:.3}", grad.len(), grad.amax());
    Ok(())
}
