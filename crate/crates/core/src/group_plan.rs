//! Group formation and dispatch.
//!
//! Agents whose pairwise distances all fall within `d_safe` form a group.
//! The lowest-id member is the core: it receives the members' states, local
//! goals and maps, runs MAPF for a collision-free discrete plan and then
//! the joint trajectory optimization. Agents outside any group run the same
//! pipeline with a single member.

use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::grid_map::{Cell, GridMap3D, Vec3};
use crate::joint_opt::{init_from_path, plan_checked, AgentSpec, FixedNeighbor, GroupPlanProblem, InitConfig, RetryOutcome, SolverConfig};
use crate::mapf::{self, MapfConfig, SpaceTimePath};
use crate::minco::{BoundaryState, MincoTrajectory};
use crate::penalty::PenaltyWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupParams {
    pub n_min: usize,
    pub n_max: usize,
    /// Pairwise distance threshold for grouping (m).
    pub d_safe: f64,
}

impl Default for GroupParams {
    fn default() -> Self {
        Self { n_min: 2, n_max: 8, d_safe: 1.2 }
    }
}

impl GroupParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 2 || self.n_max < self.n_min {
            return Err(PlanError::Config(format!("need 2 <= n_min <= n_max, got {} and {}", self.n_min, self.n_max)));
        }
        if !(self.d_safe >= 0.0) {
            return Err(PlanError::Config(format!("d_safe must be non-negative, got {}", self.d_safe)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Member ids of every group, each sorted ascending.
    pub groups: Vec<Vec<usize>>,
    pub isolated: Vec<usize>,
}

impl Partition {
    /// True when groups and isolated agents cover `ids` exactly once.
    pub fn is_disjoint_cover(&self, ids: &[usize]) -> bool {
        let mut all: Vec<usize> = self.groups.iter().flatten().chain(&self.isolated).copied().collect();
        all.sort_unstable();
        let mut want = ids.to_vec();
        want.sort_unstable();
        all == want
    }
}

/// Partitions agents by the grouping criteria: greedy maximal cliques of
/// the proximity graph, extracted in ascending id order.
pub fn group_check(states: &[(usize, Vec3)], params: &GroupParams) -> Partition {
    let mut agents = states.to_vec();
    agents.sort_by_key(|a| a.0);
    let near = |a: &Vec3, b: &Vec3| (a - b).norm() <= params.d_safe;
    let mut pool: Vec<(usize, Vec3)> = agents;
    let mut out = Partition::default();
    while !pool.is_empty() {
        let seed = pool.remove(0);
        let mut clique = vec![seed];
        for cand in &pool {
            if clique.iter().all(|m| near(&m.1, &cand.1)) {
                clique.push(*cand);
            }
        }
        if clique.len() < params.n_min {
            out.isolated.push(seed.0);
            continue;
        }
        let ids: Vec<usize> = clique.iter().map(|m| m.0).collect();
        let mut taken = Vec::new();
        for chunk in ids.chunks(params.n_max) {
            if chunk.len() >= params.n_min {
                out.groups.push(chunk.to_vec());
                taken.extend_from_slice(chunk);
            }
        }
        if !taken.contains(&seed.0) {
            out.isolated.push(seed.0);
        }
        // members of a short trailing chunk stay in the pool
        pool.retain(|a| !taken.contains(&a.0));
    }
    out.isolated.sort_unstable();
    out
}

/// Core agent of a group: its lowest id.
pub fn select_core(group: &[usize]) -> Option<usize> {
    group.iter().copied().min()
}

/// What one planning cycle asks of the planners.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Directive {
    Group { core: usize, members: Vec<usize> },
    Single { agent: usize },
}

/// Turns a partition into directives ordered by core or agent id.
pub fn dispatch(partition: &Partition) -> Vec<Directive> {
    let mut out: Vec<Directive> = partition
        .groups
        .iter()
        .filter_map(|g| select_core(g).map(|core| Directive::Group { core, members: g.clone() }))
        .chain(partition.isolated.iter().map(|&agent| Directive::Single { agent }))
        .collect();
    out.sort_by_key(|d| match d {
        Directive::Group { core, .. } => *core,
        Directive::Single { agent } => *agent,
    });
    out
}

/// One line of the partition event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionEvent {
    pub time: f64,
    pub members: Vec<usize>,
    pub core: usize,
}

pub fn write_partition_event<W: Write>(mut w: W, event: &PartitionEvent) -> Result<()> {
    serde_json::to_writer(&mut w, event)?;
    writeln!(w)?;
    Ok(())
}

/// Settings of the map-to-trajectory pipeline shared by group and single
/// solves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Distance to the local goal (m).
    pub horizon: f64,
    /// Extra map kept around members and local goals (m).
    pub window_margin: f64,
    /// Cell size of the MAPF grid, rounded to a multiple of the map cell.
    pub mapf_resolution: f64,
    /// Obstacle inflation of the MAPF grid (m).
    pub search_inflation: f64,
    /// Merge member maps for group solves; otherwise the core's map is used.
    pub share_maps: bool,
    pub init: InitConfig,
    pub mapf: MapfConfig,
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            horizon: 8.0,
            window_margin: 1.5,
            mapf_resolution: 0.2,
            search_inflation: 0.4,
            share_maps: true,
            init: InitConfig { max_piece_length: Some(1.5), ..InitConfig::default() },
            mapf: MapfConfig { time_budget: None, ..MapfConfig::default() },
            solver: SolverConfig::default(),
        }
    }
}

/// One member's planning input. `map` is the member's own knowledge.
#[derive(Clone, Debug)]
pub struct MemberInput<'a> {
    pub id: usize,
    pub state: BoundaryState,
    pub goal: Vec3,
    pub map: &'a GridMap3D,
}

#[derive(Clone, Debug)]
pub struct GroupSolution {
    /// `(id, trajectory)` per member, in input order. Empty on emergency stop.
    pub trajectories: Vec<(usize, MincoTrajectory)>,
    pub local_goals: Vec<Vec3>,
    pub retries: usize,
    pub emergency_stop: bool,
    /// False when MAPF failed and straight-line initial guesses were used.
    pub mapf_used: bool,
    pub mapf_time: Duration,
    pub optimize_time: Duration,
}

/// Cell nearest to `c` that is free in `map` and not in `taken`, searched
/// in growing cubes.
fn free_cell_near(map: &GridMap3D, c: Cell, taken: &[Cell]) -> Option<Cell> {
    let d = map.dims();
    let c = Cell::new(c.x.clamp(0, d[0] as i32 - 1), c.y.clamp(0, d[1] as i32 - 1), c.z.clamp(0, d[2] as i32 - 1));
    let reach = d.iter().copied().max().unwrap_or(1) as i32;
    for r in 0..=reach {
        let mut best: Option<(i64, Cell)> = None;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    let n = c.offset(dx, dy, dz);
                    if map.is_blocked(n) || taken.contains(&n) {
                        continue;
                    }
                    let key = (dx * dx + dy * dy + dz * dz) as i64;
                    if best.is_none_or(|(k, b)| (key, n) < (k, b)) {
                        best = Some((key, n));
                    }
                }
            }
        }
        if let Some((_, n)) = best {
            return Some(n);
        }
    }
    None
}

/// Point `horizon` metres toward `goal`, or `goal` itself when closer.
pub fn local_target(position: &Vec3, goal: &Vec3, horizon: f64) -> Vec3 {
    let d = goal - position;
    let n = d.norm();
    if n <= horizon {
        *goal
    } else {
        position + d * (horizon / n)
    }
}

fn straight_path(a: Cell, b: Cell) -> SpaceTimePath {
    let n = (b.x - a.x).abs().max((b.y - a.y).abs()).max((b.z - a.z).abs()).max(1);
    let states = (0..=n)
        .map(|k| {
            let f = k as f64 / n as f64;
            let p = a.as_vec().lerp(&b.as_vec(), f);
            mapf::SpaceTimeState { cell: Cell::new(p.x.round() as i32, p.y.round() as i32, p.z.round() as i32), t: k as usize }
        })
        .collect();
    SpaceTimePath { states, cost: 0.0 }
}

/// Plans the members jointly (a single member gives the K = 1 planner).
/// `neighbors` carry time offsets relative to the solve's start.
pub fn solve_group(
    members: &[MemberInput<'_>],
    neighbors: Vec<FixedNeighbor>,
    weights: &PenaltyWeights,
    cfg: &PipelineConfig,
) -> Result<GroupSolution> {
    if members.is_empty() {
        return Err(PlanError::Contract("empty group".into()));
    }
    let core = members.iter().min_by_key(|m| m.id).expect("nonempty");
    let mut known = core.map.clone();
    if cfg.share_maps {
        for m in members {
            if m.id != core.id {
                known = known.merge(m.map)?;
            }
        }
    }
    // window around members and their local targets
    let targets: Vec<Vec3> = members.iter().map(|m| local_target(&m.state.position, &m.goal, cfg.horizon)).collect();
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in members.iter().map(|m| &m.state.position).chain(&targets) {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let pad = Vec3::new(cfg.window_margin, cfg.window_margin, f64::INFINITY);
    let lo = (lo - pad).sup(&known.origin());
    let hi = (hi + pad).inf(&(known.max_corner() - Vec3::repeat(1e-9)));
    let mut fine = known.crop(&lo, &hi)?;
    fine.build_distance_field();
    let factor = (cfg.mapf_resolution / fine.resolution()).round().max(1.0) as usize;
    let coarse = fine.inflated(cfg.search_inflation).coarsened(factor)?;

    // local goals on distinct free search cells; exact goals are kept when
    // they are reachable this round
    let mut starts = Vec::new();
    for m in members {
        let c = free_cell_near(&coarse, coarse.world_to_cell_clamped(&m.state.position), &starts)
            .ok_or_else(|| PlanError::Infeasible("no free start cell".into()))?;
        starts.push(c);
    }
    let mut goal_cells = Vec::new();
    let mut local_goals = Vec::new();
    for (m, t) in members.iter().zip(&targets) {
        let want = coarse.world_to_cell_clamped(t);
        let c = free_cell_near(&coarse, want, &goal_cells).ok_or_else(|| PlanError::Infeasible("no free goal cell".into()))?;
        goal_cells.push(c);
        let exact = c == want && (t - m.goal).norm() < 1e-12;
        local_goals.push(if exact { m.goal } else { coarse.cell_to_world(c) });
    }

    let t0 = Instant::now();
    let paths = mapf::plan(&starts, &goal_cells, &coarse, &cfg.mapf).map(|s| s.paths).ok();
    let mapf_time = t0.elapsed();
    let mapf_used = paths.is_some();
    let paths = paths.unwrap_or_else(|| starts.iter().zip(&goal_cells).map(|(a, b)| straight_path(*a, *b)).collect());

    let init = InitConfig {
        step_time: cfg.init.step_time.or(Some(coarse.resolution() / cfg.init.target_speed)),
        ..cfg.init.clone()
    };
    let mut agents = Vec::new();
    let mut initial = Vec::new();
    for ((m, path), goal) in members.iter().zip(&paths).zip(&local_goals) {
        let tail = BoundaryState::at_rest(*goal);
        let (q, t) = init_from_path(path, &coarse, &m.state, &tail, &init);
        initial.push(MincoTrajectory::jerk(m.state, tail, q, t)?);
        agents.push(AgentSpec { id: m.id, head: m.state, tail });
    }
    let mut problem = GroupPlanProblem::new(agents, initial, weights.clone(), &fine);
    problem.solver = cfg.solver.clone();
    problem.neighbors = neighbors;
    let t1 = Instant::now();
    let outcome = plan_checked(&problem)?;
    let optimize_time = t1.elapsed();
    let (trajectories, retries, emergency_stop) = match outcome.result {
        RetryOutcome::Safe { trajectories, retries, .. } => {
            (members.iter().map(|m| m.id).zip(trajectories).collect(), retries, false)
        }
        RetryOutcome::EmergencyStop { retries, .. } => (Vec::new(), retries, true),
    };
    Ok(GroupSolution { trajectories, local_goals, retries, emergency_stop, mapf_used, mapf_time, optimize_time })
}
