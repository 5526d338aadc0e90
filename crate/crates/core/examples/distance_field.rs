//! Builds a voxel map with a pillar and a box, computes its Euclidean
//! distance field and queries distances and gradients along a line.

use group_planner::error::Result;
use group_planner::grid_map::{GridMap3D, Vec3};

fn main() -> Result<()> {
    let mut map = GridMap3D::with_size(Vec3::zeros(), Vec3::new(6.0, 4.0, 3.0), 0.1)?;
    map.add_pillar((2.0, 2.0), 0.3);
    map.add_box(Vec3::new(4.0, 0.5, 0.0), Vec3::new(4.4, 3.5, 1.2));
    map.build_distance_field();
    println!("{} of {} cells occupied", map.occupied_count(), map.cell_count());

    println!("{:>6} {:>8} {:>28}", "x", "dist", "gradient");
    for k in 0..=10 {
        let p = Vec3::new(0.5 + 0.5 * k as f64, 1.2, 1.0);
        let q = map.distance_and_gradient(&p)?;
        let g = q.gradient;
        println!("{:>6.2} {:>8.3} [{:>7.3}, {:>7.3}, {:>7.3}]", p.x, q.distance, g.x, g.y, g.z);
    }

    let (a, b) = (Vec3::new(0.5, 2.0, 1.0), Vec3::new(5.5, 2.0, 1.0));
    println!("line of sight across the pillar: {}", map.line_of_sight(&a, &b));
    let inflated = map.inflated(0.25);
    println!("inflated by 0.25 m: {} occupied cells", inflated.occupied_count());
    Ok(())
}
