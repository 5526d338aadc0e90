pub mod error;
pub mod gradcheck;
pub mod grid_map;
pub mod minco;
pub mod penalty;
pub mod mapf;
pub mod joint_opt;
pub mod group_plan;
pub mod sim;
