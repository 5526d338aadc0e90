//! Partitions a snapshot of agent positions into groups and isolated
//! agents, selects a core per group and prints the dispatch directives.

use group_planner::grid_map::Vec3;
use group_planner::group_plan::{dispatch, group_check, Directive, GroupParams};

fn main() {
    let states: Vec<(usize, Vec3)> = vec![
        (0, Vec3::new(0.0, 0.0, 1.0)),
        (1, Vec3::new(1.0, 0.5, 1.0)),
        (2, Vec3::new(0.5, 1.0, 1.2)),
        (3, Vec3::new(6.0, 6.0, 1.0)),
        (4, Vec3::new(6.8, 6.2, 1.0)),
        (5, Vec3::new(20.0, 0.0, 1.0)),
        // chain: 6-7 and 7-8 are close, 6-8 are not
        (6, Vec3::new(10.0, 10.0, 1.0)),
        (7, Vec3::new(11.0, 10.0, 1.0)),
        (8, Vec3::new(12.0, 10.0, 1.0)),
    ];
    let params = GroupParams { d_safe: 1.5, ..GroupParams::default() };
    let partition = group_check(&states, &params);
    let ids: Vec<usize> = states.iter().map(|s| s.0).collect();
    println!("groups {:?}, isolated {:?}, disjoint cover {}", partition.groups, partition.isolated, partition.is_disjoint_cover(&ids));
    for d in dispatch(&partition) {
        match d {
            Directive::Group { core, members } => println!("group solve at core {core} for {members:?}"),
            Directive::Single { agent } => println!("single solve for {agent}"),
        }
    }
}
