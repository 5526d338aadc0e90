//! MAPF search-time sweep over agent counts, obstacle densities and
//! volumes.

use std::f64::consts::PI;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::grid_map::{Cell, ForestSpec, GridMap3D, Vec3};
use crate::mapf::{self, MapfConfig};

/// Real-time threshold for one MAPF search (s).
pub const REALTIME_LIMIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub agent_counts: Vec<usize>,
    /// Average pillar spacing (m); smaller is denser.
    pub spacings: Vec<f64>,
    /// Volume extents `[x, y, z]` (m).
    pub volumes: Vec<[f64; 3]>,
    pub seeds: usize,
    pub base_seed: u64,
    pub resolution: f64,
    pub pillar_radius: f64,
    /// Obstacle inflation applied before the search (m).
    pub inflation: f64,
    pub omega: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            agent_counts: vec![2, 4, 6, 8],
            spacings: vec![1.0, 0.5],
            volumes: vec![[8.0, 8.0, 4.0], [12.0, 12.0, 8.0]],
            seeds: 10,
            base_seed: 0,
            resolution: 0.1,
            pillar_radius: 0.05,
            inflation: 0.1,
            omega: 1.3,
        }
    }
}

/// One generated search instance.
#[derive(Clone, Debug)]
pub struct BenchInstance {
    pub map: GridMap3D,
    pub starts: Vec<Cell>,
    pub goals: Vec<Cell>,
}

/// `agents` on a horizontal circle at mid-height, each heading to the
/// antipodal point, in a seeded forest of full-height pillars.
pub fn bench_instance(agents: usize, spacing: f64, size: [f64; 3], seed: u64, cfg: &BenchConfig) -> Result<BenchInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = Vec3::from(size);
    let center = Vec3::new(0.5 * size.x, 0.5 * size.y, 0.5 * size.z);
    let radius = 0.4 * size.x.min(size.y);
    let phase = rng.random_range(0.0..2.0 * PI);
    let ring: Vec<Vec3> = (0..2 * agents)
        .map(|k| {
            let th = phase + PI * k as f64 / agents as f64;
            center + Vec3::new(radius * th.cos(), radius * th.sin(), 0.0)
        })
        .collect();
    let mut map = GridMap3D::random_forest(&ForestSpec {
        seed: rng.random(),
        origin: Vec3::zeros(),
        size,
        resolution: cfg.resolution,
        avg_spacing: spacing,
        pillar_radius: cfg.pillar_radius,
        clear_zones: ring.iter().map(|p| (*p, 0.3)).collect(),
    })?;
    map.inflate(cfg.inflation);
    let cell = |p: &Vec3| map.world_to_cell(p);
    let starts = ring[..agents].iter().map(cell).collect::<Result<Vec<_>>>()?;
    let goals = ring[agents..].iter().map(cell).collect::<Result<Vec<_>>>()?;
    Ok(BenchInstance { map, starts, goals })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub agents: usize,
    pub spacing: f64,
    pub size: [f64; 3],
    pub volume: f64,
    pub runs: usize,
    pub failures: usize,
    pub mean_time: f64,
    pub max_time: f64,
    pub over_limit: bool,
}

/// Mean search time of `seeds` instances of one sweep cell.
pub fn bench_cell(agents: usize, spacing: f64, size: [f64; 3], cfg: &BenchConfig) -> Result<BenchRow> {
    let mapf_cfg = MapfConfig { omega: cfg.omega, time_budget: Some(Duration::from_secs(5)), ..MapfConfig::default() };
    let mut times = Vec::new();
    let mut failures = 0;
    for s in 0..cfg.seeds {
        let inst = bench_instance(agents, spacing, size, cfg.base_seed.wrapping_add(s as u64), cfg)?;
        let t0 = Instant::now();
        let res = mapf::plan(&inst.starts, &inst.goals, &inst.map, &mapf_cfg);
        times.push(t0.elapsed().as_secs_f64());
        match res {
            Ok(_) => {}
            Err(PlanError::Timeout { .. } | PlanError::Infeasible(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
    let max = times.iter().copied().fold(0.0, f64::max);
    Ok(BenchRow {
        agents,
        spacing,
        size,
        volume: size[0] * size[1] * size[2],
        runs: times.len(),
        failures,
        mean_time: mean,
        max_time: max,
        over_limit: mean > REALTIME_LIMIT,
    })
}

/// Full sweep: agent counts x spacings x volumes.
pub fn benchmark_emapf(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &size in &cfg.volumes {
        for &spacing in &cfg.spacings {
            for &n in &cfg.agent_counts {
                rows.push(bench_cell(n, spacing, size, cfg)?);
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "agents,spacing,size_x,size_y,size_z,volume,runs,failures,mean_time,max_time,over_limit")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{}",
            r.agents, r.spacing, r.size[0], r.size[1], r.size[2], r.volume, r.runs, r.failures, r.mean_time, r.max_time, r.over_limit
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sparse_cell_is_fast_and_solved() {
        let cfg = BenchConfig { seeds: 3, ..BenchConfig::default() };
        let row = bench_cell(2, 1.0, [8.0, 8.0, 4.0], &cfg).unwrap();
        assert_eq!(row.failures, 0);
        assert!(row.mean_time < REALTIME_LIMIT, "{}", row.mean_time);
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &[row]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn instances_are_seeded() {
        let cfg = BenchConfig::default();
        let a = bench_instance(4, 0.5, [8.0, 8.0, 4.0], 7, &cfg).unwrap();
        let b = bench_instance(4, 0.5, [8.0, 8.0, 4.0], 7, &cfg).unwrap();
        assert_eq!(a.starts, b.starts);
        assert_eq!(a.map.occupied_count(), b.map.occupied_count());
        for c in a.starts.iter().chain(&a.goals) {
            assert!(!a.map.is_occupied(*c).unwrap());
        }
    }
}
