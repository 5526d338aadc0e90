//! Compares every objective gradient with central finite differences on
//! randomized group instances.

use group_planner::error::Result;
use group_planner::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> Result<()> {
    let cfg = GradcheckConfig { instances: 10, ..GradcheckConfig::default() };
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.summary());
    println!("all terms within {:.0e}: {}", report.tolerance, report.passed());
    Ok(())
}
