//! Scenario files and the shipped scenario library.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::grid_map::{ForestSpec, GridMap3D, Vec3};
use crate::group_plan::{GroupParams, PipelineConfig};
use crate::penalty::PenaltyWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapKind {
    Empty,
    RandomForest {
        avg_spacing: f64,
        pillar_radius: f64,
        /// Pillars are kept this far (m) from every start and goal.
        clear_radius: f64,
    },
    WallWithGate {
        /// Wall plane position along x (m).
        wall_x: f64,
        thickness: f64,
        /// Opening center `(y, z)` (m).
        gate_center: [f64; 2],
        /// Opening width and height (m).
        gate_size: [f64; 2],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PillarSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    #[serde(flatten)]
    pub kind: MapKind,
    pub origin: [f64; 3],
    pub size: [f64; 3],
    pub resolution: f64,
    /// Extra full-height pillars on top of the generated map.
    #[serde(default)]
    pub pillars: Vec<PillarSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAgent {
    pub start: [f64; 3],
    /// Visited in order; the agent must stop at each one.
    pub goals: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_velocity: f64,
    pub max_acceleration: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_velocity: 1.7, max_acceleration: 6.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sensing {
    /// Every agent knows the whole map.
    Global,
    /// Agents learn occupied cells within `range` (m) of their position.
    Local { range: f64 },
}

/// Replan loop timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplanConfig {
    /// Simulated time between planning cycles (s).
    pub period: f64,
    /// Age (s) at which a trajectory that stops short of the goal is
    /// refreshed. Agents start with seeded phase offsets.
    pub refresh: f64,
    pub arrival_tolerance: f64,
    pub arrival_speed: f64,
}

impl Default for ReplanConfig {
    fn default() -> Self {
        Self { period: 0.1, refresh: 1.0, arrival_tolerance: 0.1, arrival_speed: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub map: MapSpec,
    pub agents: Vec<ScenarioAgent>,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub group: GroupParams,
    #[serde(default)]
    pub seed: u64,
    /// Simulation step (s).
    pub dt: f64,
    /// Planning horizon (m); overrides `planner.horizon`.
    pub horizon: f64,
    /// Simulated time limit (s).
    pub timeout: f64,
    pub sensing: Sensing,
    #[serde(default)]
    pub weights: PenaltyWeights,
    #[serde(default)]
    pub planner: PipelineConfig,
    #[serde(default)]
    pub replan: ReplanConfig,
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::from(a)
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Penalty weights with the scenario's dynamic limits applied.
    pub fn effective_weights(&self) -> PenaltyWeights {
        PenaltyWeights {
            max_velocity: self.limits.max_velocity,
            max_acceleration: self.limits.max_acceleration,
            ..self.weights.clone()
        }
    }

    /// Pipeline settings with the scenario's horizon and limits applied.
    pub fn effective_pipeline(&self) -> PipelineConfig {
        let mut p = self.planner.clone();
        p.horizon = self.horizon;
        p.init.target_speed = p.init.target_speed.min(self.limits.max_velocity);
        p.init.max_acceleration = p.init.max_acceleration.min(self.limits.max_acceleration);
        p
    }

    /// Ground-truth occupancy.
    pub fn build_map(&self) -> Result<GridMap3D> {
        let m = &self.map;
        let mut map = match &m.kind {
            MapKind::Empty => GridMap3D::with_size(v(m.origin), v(m.size), m.resolution)?,
            MapKind::RandomForest { avg_spacing, pillar_radius, clear_radius } => {
                let clear_zones = self
                    .agents
                    .iter()
                    .flat_map(|a| std::iter::once(&a.start).chain(&a.goals))
                    .map(|p| (v(*p), *clear_radius))
                    .collect();
                GridMap3D::random_forest(&ForestSpec {
                    seed: self.seed,
                    origin: v(m.origin),
                    size: v(m.size),
                    resolution: m.resolution,
                    avg_spacing: *avg_spacing,
                    pillar_radius: *pillar_radius,
                    clear_zones,
                })?
            }
            MapKind::WallWithGate { wall_x, thickness, gate_center, gate_size } => {
                let mut map = GridMap3D::with_size(v(m.origin), v(m.size), m.resolution)?;
                let lo = v(m.origin);
                let hi = map.max_corner();
                let (x0, x1) = (wall_x - 0.5 * thickness, wall_x + 0.5 * thickness);
                let (gy0, gy1) = (gate_center[0] - 0.5 * gate_size[0], gate_center[0] + 0.5 * gate_size[0]);
                let (gz0, gz1) = (gate_center[1] - 0.5 * gate_size[1], gate_center[1] + 0.5 * gate_size[1]);
                map.add_box(Vec3::new(x0, lo.y, lo.z), Vec3::new(x1, gy0, hi.z));
                map.add_box(Vec3::new(x0, gy1, lo.z), Vec3::new(x1, hi.y, hi.z));
                map.add_box(Vec3::new(x0, gy0, lo.z), Vec3::new(x1, gy1, gz0));
                map.add_box(Vec3::new(x0, gy0, gz1), Vec3::new(x1, gy1, hi.z));
                map
            }
        };
        for p in &m.pillars {
            map.add_pillar((p.center[0], p.center[1]), p.radius);
        }
        Ok(map)
    }

    pub fn validate(&self, map: &GridMap3D) -> Result<()> {
        self.group.validate()?;
        let w = self.effective_weights();
        w.validate()?;
        if !(self.dt > 0.0) || !(self.replan.period >= self.dt) || !(self.horizon > 0.0) || !(self.timeout > 0.0) {
            return Err(PlanError::Config("need dt > 0, period >= dt, horizon > 0 and timeout > 0".into()));
        }
        if self.agents.is_empty() {
            return Err(PlanError::Config("scenario has no agents".into()));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.goals.is_empty() {
                return Err(PlanError::Config(format!("agent {i} has no goals")));
            }
            for p in std::iter::once(&a.start).chain(&a.goals) {
                let c = map.world_to_cell(&v(*p))?;
                if map.is_occupied(c)? {
                    return Err(PlanError::Config(format!("agent {i}: point {p:?} is occupied")));
                }
            }
            for (j, b) in self.agents.iter().enumerate().skip(i + 1) {
                let d = w.metric_distance(&v(a.start), &v(b.start));
                if d < w.swarm_clearance {
                    return Err(PlanError::Config(format!("agents {i} and {j} start {d:.3} m apart")));
                }
            }
        }
        Ok(())
    }
}

/// Eight agents on a circle of radius `r` swapping to antipodal points in
/// empty space.
pub fn circle_exchange(agents: usize, radius: f64, seed: u64) -> Scenario {
    let z = 2.0;
    // seeded rotation of the whole formation
    let rot = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..2.0 * PI / agents as f64);
    let list = (0..agents)
        .map(|i| {
            let th = rot + 2.0 * PI * i as f64 / agents as f64;
            let (s, c) = th.sin_cos();
            ScenarioAgent { start: [radius * c, radius * s, z], goals: vec![[-radius * c, -radius * s, z]] }
        })
        .collect();
    let half = radius + 3.0;
    Scenario {
        name: "circle_exchange".into(),
        map: MapSpec {
            kind: MapKind::Empty,
            origin: [-half, -half, 0.0],
            size: [2.0 * half, 2.0 * half, 4.0],
            resolution: 0.2,
            pillars: Vec::new(),
        },
        agents: list,
        limits: Limits::default(),
        group: GroupParams { d_safe: 4.0, ..GroupParams::default() },
        seed,
        dt: 0.02,
        horizon: 8.0,
        timeout: 90.0,
        sensing: Sensing::Global,
        weights: PenaltyWeights::default(),
        planner: PipelineConfig::default(),
        replan: ReplanConfig::default(),
    }
}

/// Six agents, three per side of a wall, crossing diagonally through a
/// 0.8 x 1.5 m opening.
pub fn narrow_gate(seed: u64) -> Scenario {
    let z = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |a: f64| rng.random_range(-a..=a);
    let mut agents = Vec::new();
    for side in [-1.0, 1.0] {
        for y in [-1.5, 0.0, 1.5] {
            let start = [3.0 * side + jitter(0.3), y + jitter(0.2), z + jitter(0.3)];
            let goal = [-3.0 * side + jitter(0.3), -y + jitter(0.2), z + jitter(0.3)];
            agents.push(ScenarioAgent { start, goals: vec![goal] });
        }
    }
    let weights = PenaltyWeights { obstacle_clearance: 0.25, ..PenaltyWeights::default() };
    let mut planner = PipelineConfig { mapf_resolution: 0.1, search_inflation: 0.25, ..PipelineConfig::default() };
    planner.init.max_piece_length = Some(0.8);
    planner.init.step_time = Some(0.3);
    Scenario {
        name: "narrow_gate".into(),
        map: MapSpec {
            kind: MapKind::WallWithGate { wall_x: 0.0, thickness: 0.2, gate_center: [0.0, 1.5], gate_size: [0.8, 1.5] },
            origin: [-5.0, -4.0, 0.0],
            size: [10.0, 8.0, 3.0],
            resolution: 0.1,
            pillars: Vec::new(),
        },
        agents,
        limits: Limits::default(),
        group: GroupParams { d_safe: 7.0, n_max: 8, ..GroupParams::default() },
        seed,
        dt: 0.02,
        horizon: 8.0,
        timeout: 120.0,
        sensing: Sensing::Global,
        weights,
        planner,
        replan: ReplanConfig::default(),
    }
}

/// Two agents with local sensing. Only agent 1 starts within sensing range
/// of a pillar standing on agent 0's straight route.
pub fn map_sharing(share_maps: bool) -> Scenario {
    Scenario {
        name: if share_maps { "map_sharing_on".into() } else { "map_sharing_off".into() },
        map: MapSpec {
            kind: MapKind::Empty,
            origin: [-2.0, -3.0, 0.0],
            size: [14.0, 12.0, 3.0],
            resolution: 0.1,
            pillars: vec![PillarSpec { center: [5.0, 0.0], radius: 0.3 }],
        },
        agents: vec![
            ScenarioAgent { start: [0.0, 0.0, 1.5], goals: vec![[10.0, 0.0, 1.5]] },
            ScenarioAgent { start: [5.0, 2.0, 1.5], goals: vec![[5.0, 7.0, 1.5]] },
        ],
        limits: Limits::default(),
        group: GroupParams { d_safe: 6.0, ..GroupParams::default() },
        seed: 0,
        dt: 0.02,
        horizon: 12.0,
        timeout: 40.0,
        sensing: Sensing::Local { range: 2.5 },
        weights: PenaltyWeights::default(),
        planner: PipelineConfig { share_maps, ..PipelineConfig::default() },
        replan: ReplanConfig { refresh: 100.0, ..ReplanConfig::default() },
    }
}

/// Single agent flying 10 m straight in empty space.
pub fn straight_line() -> Scenario {
    Scenario {
        name: "straight_line".into(),
        map: MapSpec {
            kind: MapKind::Empty,
            origin: [-2.0, -3.0, 0.0],
            size: [14.0, 6.0, 3.0],
            resolution: 0.2,
            pillars: Vec::new(),
        },
        agents: vec![ScenarioAgent { start: [0.0, 0.0, 1.5], goals: vec![[10.0, 0.0, 1.5]] }],
        limits: Limits::default(),
        group: GroupParams::default(),
        seed: 0,
        dt: 0.02,
        horizon: 8.0,
        timeout: 30.0,
        sensing: Sensing::Global,
        weights: PenaltyWeights::default(),
        planner: PipelineConfig::default(),
        replan: ReplanConfig::default(),
    }
}

/// Large-scale traffic: `n` agents in a 50 x 50 m forest, each visiting
/// `goals` seeded random waypoints.
pub fn air_traffic(n: usize, goals: usize, seed: u64) -> Scenario {
    let side = 50.0;
    let z = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (n as f64).sqrt().ceil() as usize;
    let pitch = (side - 6.0) / cols as f64;
    let mut points: Vec<[f64; 3]> = Vec::new();
    let mut agents = Vec::new();
    let spaced = |p: &[f64; 3], taken: &[[f64; 3]]| taken.iter().all(|q| (v(*p) - v(*q)).norm() >= 3.0);
    for i in 0..n {
        let start = [3.0 + pitch * ((i % cols) as f64 + 0.5), 3.0 + pitch * ((i / cols) as f64 + 0.5), z];
        points.push(start);
        agents.push(ScenarioAgent { start, goals: Vec::new() });
    }
    // goals at distinct times may share areas, but each goal set is spaced
    for round in 0..goals {
        let mut taken: Vec<[f64; 3]> = if round + 1 == goals { points.clone() } else { Vec::new() };
        for a in agents.iter_mut() {
            let g = loop {
                let g = [rng.random_range(3.0..side - 3.0), rng.random_range(3.0..side - 3.0), z];
                let prev = a.goals.last().copied().unwrap_or(a.start);
                if spaced(&g, &taken) && (v(g) - v(prev)).norm() > 10.0 {
                    break g;
                }
            };
            taken.push(g);
            a.goals.push(g);
        }
    }
    let planner = PipelineConfig { mapf_resolution: 0.4, ..PipelineConfig::default() };
    Scenario {
        name: "air_traffic".into(),
        map: MapSpec {
            kind: MapKind::RandomForest { avg_spacing: 5.0, pillar_radius: 0.25, clear_radius: 1.5 },
            origin: [0.0, 0.0, 0.0],
            size: [side, side, 3.0],
            resolution: 0.2,
            pillars: Vec::new(),
        },
        agents,
        limits: Limits::default(),
        group: GroupParams { d_safe: 3.0, ..GroupParams::default() },
        seed,
        dt: 0.05,
        horizon: 6.0,
        timeout: 300.0,
        sensing: Sensing::Global,
        weights: PenaltyWeights::default(),
        planner,
        replan: ReplanConfig::default(),
    }
}
