//! Bounded-suboptimal multi-agent pathfinding on the voxel grid.
//!
//! The high level is a focal search over a conflict tree; the low level is a
//! space-time focal A* per agent. Agents move between 26-connected cells or
//! wait, one move per timestep. A path's cost sums the Euclidean move
//! lengths (a wait costs one axial move) and, for every state entered, the
//! tie-breaker distance to the agent's start-goal line. The returned total
//! cost is at most `omega` times the optimum under that cost.
//!
//! Agents that reached their goal are treated as staying there forever.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use ordered_float::OrderedFloat;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::grid_map::{Cell, GridMap3D, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapfConfig {
    /// Suboptimality factor, at least 1.
    pub omega: f64,
    /// Tie-breaker weight in cost per metre of line offset, expressed in
    /// multiples of the map resolution.
    pub tie_breaker_weight: f64,
    pub max_agents: usize,
    pub max_high_level_nodes: usize,
    /// Wall-clock budget for one solve; `None` for unbounded (reproducible).
    pub time_budget: Option<Duration>,
    /// Low-level FOCAL order among nodes with equal conflict counts.
    pub focal_tie_break: FocalTieBreak,
}

/// Secondary order of the low-level FOCAL list after the conflict count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalTieBreak {
    /// Smallest `f`, then largest `g`: plain A* order when no conflicts
    /// are at stake.
    LowestCost,
    /// Smallest `g + omega * h`, then smallest `f`: weighted-A* order,
    /// which spends the `omega` slack on reaching the goal sooner.
    #[default]
    WeightedCost,
}

impl Default for MapfConfig {
    fn default() -> Self {
        Self {
            omega: 1.3,
            tie_breaker_weight: 0.5,
            max_agents: 8,
            max_high_level_nodes: 100_000,
            time_budget: Some(Duration::from_millis(100)),
            focal_tie_break: FocalTieBreak::default(),
        }
    }
}

impl MapfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 1.0) {
            return Err(PlanError::Config(format!("omega must be >= 1, got {}", self.omega)));
        }
        if !(self.tie_breaker_weight >= 0.0) {
            return Err(PlanError::Config("tie-breaker weight must be non-negative".into()));
        }
        if self.max_agents == 0 || self.max_high_level_nodes == 0 {
            return Err(PlanError::Config("agent and node limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceTimeState {
    pub cell: Cell,
    pub t: usize,
}

/// Discrete path with one state per timestep starting at `t = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePath {
    pub states: Vec<SpaceTimeState>,
    pub cost: f64,
}

impl SpaceTimePath {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Cell occupied at timestep `t`; the last cell is held forever.
    pub fn cell_at(&self, t: usize) -> Cell {
        self.states[t.min(self.states.len() - 1)].cell
    }

    pub fn goal(&self) -> Cell {
        self.states[self.states.len() - 1].cell
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.states.iter().map(|s| s.cell).collect()
    }

    pub fn world_points(&self, map: &GridMap3D) -> Vec<Vec3> {
        self.states.iter().map(|s| map.cell_to_world(s.cell)).collect()
    }
}

/// Forbids `agent` from occupying `cell` at `t`, or from traversing
/// `from_cell -> cell` between `t - 1` and `t` when `from_cell` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Constraint {
    pub agent: usize,
    pub cell: Cell,
    pub t: usize,
    pub from_cell: Option<Cell>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    Vertex,
    Edge,
}

/// A collision between two agents. For a vertex conflict both cells are
/// the shared cell; for an edge conflict `cells` is the first agent's move
/// `[from, to]` between `t - 1` and `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub agents: (usize, usize),
    pub kind: ConflictKind,
    pub cells: [Cell; 2],
    pub t: usize,
}

impl Conflict {
    /// The two constraints that each resolve this conflict for one agent.
    pub fn constraints(&self) -> [Constraint; 2] {
        let (a, b) = self.agents;
        match self.kind {
            ConflictKind::Vertex => [
                Constraint { agent: a, cell: self.cells[0], t: self.t, from_cell: None },
                Constraint { agent: b, cell: self.cells[0], t: self.t, from_cell: None },
            ],
            ConflictKind::Edge => [
                Constraint { agent: a, cell: self.cells[1], t: self.t, from_cell: Some(self.cells[0]) },
                Constraint { agent: b, cell: self.cells[0], t: self.t, from_cell: Some(self.cells[1]) },
            ],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConflictTreeNode {
    pub constraints: Vec<Constraint>,
    pub solution: Vec<SpaceTimePath>,
    /// Per-agent low-level lower bounds.
    pub f_mins: Vec<f64>,
    pub cost: f64,
    pub lower_bound: f64,
    pub conflict_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MapfStats {
    pub high_level_expanded: usize,
    pub high_level_generated: usize,
    pub low_level_expanded: usize,
    /// Minimum lower bound over OPEN at every high-level iteration.
    pub lower_bound_trace: Vec<f64>,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct MapfSolution {
    pub paths: Vec<SpaceTimePath>,
    pub cost: f64,
    pub lower_bound: f64,
    pub stats: MapfStats,
}

/// Scaled point-to-line distance from `node` to the line through `start`
/// and `goal`; the distance to `start` when the two coincide.
pub fn tie_breaker(node: &Vec3, start: &Vec3, goal: &Vec3, weight: f64) -> f64 {
    let dir = goal - start;
    let rel = node - start;
    let len2 = dir.norm_squared();
    if len2 == 0.0 {
        return weight * rel.norm();
    }
    weight * (rel - dir * (rel.dot(&dir) / len2)).norm()
}

/// Indices of the OPEN nodes admitted to FOCAL: cost within `omega` times
/// the lower bound.
pub fn high_level_focal_admit(open_costs: &[f64], lower_bound: f64, omega: f64) -> Vec<usize> {
    let bound = lower_bound * omega;
    open_costs.iter().enumerate().filter(|(_, c)| admits(**c, bound)).map(|(i, _)| i).collect()
}

#[inline]
fn admits(cost: f64, bound: f64) -> bool {
    cost <= bound + 1e-9 * bound.abs().max(1.0)
}

fn vertex_conflict_at(paths: &[SpaceTimePath], i: usize, j: usize, t: usize) -> bool {
    paths[i].cell_at(t) == paths[j].cell_at(t)
}

fn edge_conflict_at(paths: &[SpaceTimePath], i: usize, j: usize, t: usize) -> bool {
    let (ai, bi) = (paths[i].cell_at(t - 1), paths[i].cell_at(t));
    let (aj, bj) = (paths[j].cell_at(t - 1), paths[j].cell_at(t));
    ai != bi && ai == bj && bi == aj
}

fn horizon(paths: &[SpaceTimePath]) -> usize {
    paths.iter().map(SpaceTimePath::len).max().unwrap_or(0)
}

/// The earliest conflict: vertex before edge at equal timestep, then the
/// lowest agent pair.
pub fn get_first_conflict(paths: &[SpaceTimePath]) -> Option<Conflict> {
    let n = paths.len();
    for t in 0..horizon(paths) {
        for i in 0..n {
            for j in i + 1..n {
                if vertex_conflict_at(paths, i, j, t) {
                    let c = paths[i].cell_at(t);
                    return Some(Conflict { agents: (i, j), kind: ConflictKind::Vertex, cells: [c, c], t });
                }
            }
        }
        if t == 0 {
            continue;
        }
        for i in 0..n {
            for j in i + 1..n {
                if edge_conflict_at(paths, i, j, t) {
                    let cells = [paths[i].cell_at(t - 1), paths[i].cell_at(t)];
                    return Some(Conflict { agents: (i, j), kind: ConflictKind::Edge, cells, t });
                }
            }
        }
    }
    None
}

/// Number of vertex and edge conflict events across all agent pairs.
pub fn count_conflicts(paths: &[SpaceTimePath]) -> usize {
    let n = paths.len();
    let mut count = 0;
    for t in 0..horizon(paths) {
        for i in 0..n {
            for j in i + 1..n {
                count += vertex_conflict_at(paths, i, j, t) as usize;
                if t > 0 {
                    count += edge_conflict_at(paths, i, j, t) as usize;
                }
            }
        }
    }
    count
}

/// Checks timing, adjacency, free cells, endpoints and conflict freedom.
pub fn validate_solution(paths: &[SpaceTimePath], starts: &[Cell], goals: &[Cell], map: &GridMap3D) -> Result<()> {
    if paths.len() != starts.len() || paths.len() != goals.len() {
        return Err(PlanError::Contract("path count does not match agent count".into()));
    }
    for (k, p) in paths.iter().enumerate() {
        if p.is_empty() {
            return Err(PlanError::Contract(format!("agent {k}: empty path")));
        }
        if p.states[0].cell != starts[k] || p.goal() != goals[k] {
            return Err(PlanError::Contract(format!("agent {k}: wrong endpoints")));
        }
        for (t, s) in p.states.iter().enumerate() {
            if s.t != t {
                return Err(PlanError::Contract(format!("agent {k}: timestep gap at {t}")));
            }
            if map.is_blocked(s.cell) {
                return Err(PlanError::Contract(format!("agent {k}: blocked cell {:?} at t={t}", s.cell)));
            }
        }
        for w in p.states.windows(2) {
            let (a, b) = (w[0].cell, w[1].cell);
            if (a.x - b.x).abs() > 1 || (a.y - b.y).abs() > 1 || (a.z - b.z).abs() > 1 {
                return Err(PlanError::Contract(format!("agent {k}: jump {a:?} -> {b:?}")));
            }
        }
    }
    if let Some(c) = get_first_conflict(paths) {
        return Err(PlanError::Contract(format!("conflict {c:?}")));
    }
    Ok(())
}

/// Exact cost of a free-space move sequence between two cells: the 3D
/// octile distance.
fn octile(a: Cell, b: Cell) -> f64 {
    let mut d = [(a.x - b.x).abs(), (a.y - b.y).abs(), (a.z - b.z).abs()];
    d.sort_unstable();
    let (c, b, a) = (d[0] as f64, d[1] as f64, d[2] as f64);
    3f64.sqrt() * c + 2f64.sqrt() * (b - c) + (a - b)
}

/// The 26 neighbor offsets followed by the wait move.
fn moves() -> &'static [(i32, i32, i32)] {
    use std::sync::OnceLock;
    static MOVES: OnceLock<Vec<(i32, i32, i32)>> = OnceLock::new();
    MOVES.get_or_init(|| {
        let mut v = Vec::with_capacity(27);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx, dy, dz) != (0, 0, 0) {
                        v.push((dx, dy, dz));
                    }
                }
            }
        }
        v.push((0, 0, 0));
        v
    })
}

fn move_length(d: (i32, i32, i32)) -> f64 {
    match d.0.abs() + d.1.abs() + d.2.abs() {
        0 | 1 => 1.0,
        2 => 2f64.sqrt(),
        _ => 3f64.sqrt(),
    }
}

/// Per-agent path cost model shared by the low level and its callers.
#[derive(Clone, Copy, Debug)]
pub struct CostModel {
    pub resolution: f64,
    /// Tie-breaker cost per metre of offset.
    pub tie_weight: f64,
    start: Vec3,
    goal: Vec3,
}

impl CostModel {
    pub fn new(map: &GridMap3D, cfg: &MapfConfig, start: Cell, goal: Cell) -> Self {
        Self {
            resolution: map.resolution(),
            tie_weight: cfg.tie_breaker_weight * map.resolution(),
            start: map.cell_to_world(start),
            goal: map.cell_to_world(goal),
        }
    }

    /// Tie-breaker cost for occupying `cell` for one step.
    pub fn state_cost(&self, map: &GridMap3D, cell: Cell) -> f64 {
        if self.tie_weight == 0.0 {
            return 0.0;
        }
        tie_breaker(&map.cell_to_world(cell), &self.start, &self.goal, self.tie_weight)
    }

    /// Cost of stepping `from -> to` (a wait when equal).
    pub fn step_cost(&self, map: &GridMap3D, from: Cell, to: Cell) -> f64 {
        let d = (to.x - from.x, to.y - from.y, to.z - from.z);
        self.resolution * move_length(d) + self.state_cost(map, to)
    }

    /// Admissible cost-to-go.
    pub fn heuristic(&self, cell: Cell, goal: Cell) -> f64 {
        self.resolution * octile(cell, goal)
    }

    /// Cost of a cell sequence under this model.
    pub fn path_cost(&self, map: &GridMap3D, cells: &[Cell]) -> f64 {
        cells.windows(2).map(|w| self.step_cost(map, w[0], w[1])).sum()
    }
}

/// Inputs of one single-agent search.
#[derive(Clone, Copy, Debug)]
pub struct LowLevelQuery<'a> {
    pub agent: usize,
    pub start: Cell,
    pub goal: Cell,
    /// Constraints on any agent; only those on `agent` are used.
    pub constraints: &'a [Constraint],
    /// Current paths of the other agents, used to count conflicts.
    pub others: &'a [&'a SpaceTimePath],
}

#[derive(Clone, Debug)]
pub struct LowLevelResult {
    pub path: SpaceTimePath,
    /// Minimum `f` over OPEN at termination: a lower bound on the optimal
    /// constrained path cost.
    pub f_min: f64,
    pub expanded: usize,
}

/// Occupancy of the other agents' paths for conflict counting, keyed by
/// cell. Each visit is an agent with the inclusive timestep range it stays
/// there; a parked agent's range is open-ended.
struct Reservations<'a> {
    others: &'a [&'a SpaceTimePath],
    visits: FxHashMap<Cell, Vec<(u16, usize, usize)>>,
    horizon: usize,
}

impl<'a> Reservations<'a> {
    fn new(others: &'a [&'a SpaceTimePath]) -> Self {
        let mut visits: FxHashMap<Cell, Vec<(u16, usize, usize)>> = FxHashMap::default();
        let mut horizon = 0;
        for (k, p) in others.iter().enumerate() {
            let last = p.len() - 1;
            horizon = horizon.max(last);
            let mut t0 = 0;
            for t in 1..=p.len() {
                if t == p.len() || p.states[t].cell != p.states[t0].cell {
                    let end = if t == p.len() { usize::MAX } else { t - 1 };
                    visits.entry(p.states[t0].cell).or_default().push((k as u16, t0, end));
                    t0 = t;
                }
            }
        }
        Self { others, visits, horizon }
    }

    /// Conflicts created by moving `from -> to` arriving at `t`.
    fn conflicts(&self, from: Cell, to: Cell, t: usize) -> u32 {
        let Some(v) = self.visits.get(&to) else { return 0 };
        let mut n = 0;
        for &(k, lo, hi) in v {
            if lo <= t && t <= hi {
                n += 1;
            }
            if from != to && lo < t && t - 1 <= hi && self.others[k as usize].cell_at(t) == from {
                n += 1;
            }
        }
        n
    }
}

struct LlNode {
    cell: Cell,
    t: usize,
    g: f64,
    f: f64,
    conflicts: u32,
    parent: usize,
    open: bool,
    focal: bool,
    /// Bumped on every update; heap entries with an older stamp are stale.
    version: u32,
}

const NO_PARENT: usize = usize::MAX;

/// Heap entries ordered so that `BinaryHeap` pops the smallest key first.
type ByF = Reverse<(OrderedFloat<f64>, usize, u32)>;
type ByFocal = Reverse<(u32, OrderedFloat<f64>, OrderedFloat<f64>, usize, u32)>;

fn by_f(n: &LlNode, id: usize) -> ByF {
    Reverse((OrderedFloat(n.f), id, n.version))
}

fn by_focal(n: &LlNode, id: usize, order: FocalTieBreak, omega: f64) -> ByFocal {
    let (a, b) = match order {
        FocalTieBreak::LowestCost => (n.f, -n.g),
        FocalTieBreak::WeightedCost => (n.g + omega * (n.f - n.g), n.f),
    };
    Reverse((n.conflicts, OrderedFloat(a), OrderedFloat(b), id, n.version))
}

/// OPEN and FOCAL of the low-level search with lazy deletion. `all` tracks
/// every open node by `f`; `pending` holds open nodes not yet in FOCAL.
struct LlQueues {
    all: BinaryHeap<ByF>,
    pending: BinaryHeap<ByF>,
    focal: BinaryHeap<ByFocal>,
    order: FocalTieBreak,
    omega: f64,
}

impl LlQueues {
    fn new(order: FocalTieBreak, omega: f64) -> Self {
        Self { all: BinaryHeap::new(), pending: BinaryHeap::new(), focal: BinaryHeap::new(), order, omega }
    }

    fn push(&mut self, nodes: &mut [LlNode], id: usize, bound: f64) {
        let n = &mut nodes[id];
        n.open = true;
        n.focal = admits(n.f, bound);
        self.all.push(by_f(n, id));
        if n.focal {
            self.focal.push(by_focal(n, id, self.order, self.omega));
        } else {
            self.pending.push(by_f(n, id));
        }
    }

    fn live(nodes: &[LlNode], id: usize, version: u32) -> bool {
        nodes[id].open && nodes[id].version == version
    }

    fn min_f(&mut self, nodes: &[LlNode]) -> Option<f64> {
        while let Some(Reverse((f, id, v))) = self.all.peek() {
            if Self::live(nodes, *id, *v) {
                return Some(f.0);
            }
            self.all.pop();
        }
        None
    }

    /// Moves pending nodes with `f` inside `bound` into FOCAL.
    fn admit(&mut self, nodes: &mut [LlNode], bound: f64) {
        while let Some(Reverse((f, id, v))) = self.pending.peek() {
            let (f, id, v) = (f.0, *id, *v);
            if Self::live(nodes, id, v) {
                if !admits(f, bound) {
                    break;
                }
                nodes[id].focal = true;
                self.focal.push(by_focal(&nodes[id], id, self.order, self.omega));
            }
            self.pending.pop();
        }
    }

    fn pop_focal(&mut self, nodes: &mut [LlNode]) -> Option<usize> {
        while let Some(Reverse((.., id, v))) = self.focal.pop() {
            if Self::live(nodes, id, v) {
                nodes[id].open = false;
                nodes[id].focal = false;
                return Some(id);
            }
        }
        None
    }
}

/// Space-time focal A* for one agent. Nodes within `omega` of the minimum
/// `f` are expanded in order of fewest conflicts with the other agents.
pub fn low_level_search(
    q: &LowLevelQuery<'_>,
    map: &GridMap3D,
    cfg: &MapfConfig,
    deadline: Option<Instant>,
) -> Result<LowLevelResult> {
    if map.is_blocked(q.start) || map.is_blocked(q.goal) {
        return Err(PlanError::Infeasible(format!("agent {}: start or goal blocked", q.agent)));
    }
    let model = CostModel::new(map, cfg, q.start, q.goal);
    let mut vertex: FxHashSet<(Cell, usize)> = FxHashSet::default();
    let mut edge: FxHashSet<(Cell, Cell, usize)> = FxHashSet::default();
    let mut last_constraint = 0;
    let mut goal_free_from = 0;
    for c in q.constraints.iter().filter(|c| c.agent == q.agent) {
        last_constraint = last_constraint.max(c.t);
        match c.from_cell {
            None => {
                vertex.insert((c.cell, c.t));
                if c.cell == q.goal {
                    goal_free_from = goal_free_from.max(c.t + 1);
                }
            }
            Some(from) => {
                edge.insert((from, c.cell, c.t));
            }
        }
    }
    let constrained = !(vertex.is_empty() && edge.is_empty());
    let reservations = Reservations::new(q.others);
    // beyond this timestep the search space no longer changes with time
    let t_cap = last_constraint.max(reservations.horizon) + 1;
    let key = |cell: Cell, t: usize| (cell, t.min(t_cap));

    let mut nodes: Vec<LlNode> = Vec::new();
    let mut index: FxHashMap<(Cell, usize), usize> = FxHashMap::default();
    let mut queues = LlQueues::new(cfg.focal_tie_break, cfg.omega);
    let h0 = model.heuristic(q.start, q.goal);
    nodes.push(LlNode {
        cell: q.start,
        t: 0,
        g: 0.0,
        f: h0,
        conflicts: 0,
        parent: NO_PARENT,
        open: false,
        focal: false,
        version: 0,
    });
    index.insert(key(q.start, 0), 0);
    queues.push(&mut nodes, 0, cfg.omega * h0);
    let mut f_min = h0;
    let mut expanded = 0usize;

    loop {
        let Some(lo) = queues.min_f(&nodes) else {
            return Err(PlanError::Infeasible(format!("agent {}: goal unreachable under constraints", q.agent)));
        };
        if lo > f_min {
            f_min = lo;
            queues.admit(&mut nodes, cfg.omega * f_min);
        }
        let id = queues.pop_focal(&mut nodes).expect("focal holds the minimum-f node");
        let (cell, t, g, conflicts) = (nodes[id].cell, nodes[id].t, nodes[id].g, nodes[id].conflicts);
        if cell == q.goal && t >= goal_free_from {
            let mut cells = Vec::with_capacity(t + 1);
            let mut cur = id;
            while cur != NO_PARENT {
                cells.push(nodes[cur].cell);
                cur = nodes[cur].parent;
            }
            // stamps past the time cap may have been merged; renumber
            let states = cells.into_iter().rev().enumerate().map(|(t, cell)| SpaceTimeState { cell, t }).collect();
            return Ok(LowLevelResult { path: SpaceTimePath { states, cost: g }, f_min, expanded });
        }
        expanded += 1;
        if expanded % 1024 == 0 && deadline.is_some_and(|d| Instant::now() > d) {
            return Err(PlanError::Timeout { expanded: 0 });
        }
        let nt = t + 1;
        for &(dx, dy, dz) in moves() {
            let next = cell.offset(dx, dy, dz);
            if map.is_blocked(next)
                || (constrained && (vertex.contains(&(next, nt)) || edge.contains(&(cell, next, nt))))
            {
                continue;
            }
            let ng = g + model.step_cost(map, cell, next);
            let nf = ng + model.heuristic(next, q.goal);
            let nc = conflicts + reservations.conflicts(cell, next, nt);
            let k = key(next, nt);
            let nid = match index.get(&k) {
                Some(&existing) => {
                    let n = &mut nodes[existing];
                    let better = ng < n.g - 1e-12 || (ng <= n.g + 1e-12 && nc < n.conflicts);
                    if !better {
                        continue;
                    }
                    n.t = nt;
                    n.g = ng;
                    n.f = nf;
                    n.conflicts = nc;
                    n.parent = id;
                    n.version += 1;
                    existing
                }
                None => {
                    nodes.push(LlNode {
                        cell: next,
                        t: nt,
                        g: ng,
                        f: nf,
                        conflicts: nc,
                        parent: id,
                        open: false,
                        focal: false,
                        version: 0,
                    });
                    index.insert(k, nodes.len() - 1);
                    nodes.len() - 1
                }
            };
            queues.push(&mut nodes, nid, cfg.omega * f_min);
        }
    }
}

struct HlEntry {
    node: ConflictTreeNode,
    open: bool,
}

/// Plans conflict-free paths for all agents.
pub fn plan(starts: &[Cell], goals: &[Cell], map: &GridMap3D, cfg: &MapfConfig) -> Result<MapfSolution> {
    cfg.validate()?;
    let n = starts.len();
    if n == 0 || n != goals.len() {
        return Err(PlanError::Contract("need matching, non-empty start and goal lists".into()));
    }
    if n > cfg.max_agents {
        return Err(PlanError::Contract(format!("{n} agents exceed the limit of {}", cfg.max_agents)));
    }
    for (k, (s, g)) in starts.iter().zip(goals).enumerate() {
        if !map.contains_cell(*s) || !map.contains_cell(*g) {
            return Err(PlanError::OutOfBounds(format!("agent {k}: endpoint outside the map")));
        }
        if map.is_blocked(*s) || map.is_blocked(*g) {
            return Err(PlanError::Contract(format!("agent {k}: endpoint in an occupied cell")));
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if starts[i] == starts[j] || goals[i] == goals[j] {
                return Err(PlanError::Contract(format!("agents {i} and {j} share an endpoint")));
            }
        }
    }
    for k in 0..n {
        if !reachable(map, starts[k], goals[k]) {
            return Err(PlanError::Infeasible(format!("agent {k}: goal unreachable")));
        }
    }

    let clock = Instant::now();
    let deadline = cfg.time_budget.map(|b| clock + b);
    let mut stats = MapfStats::default();
    let timeout = |stats: &MapfStats| PlanError::Timeout { expanded: stats.high_level_expanded };

    // root: agents planned in order, counting conflicts with earlier ones
    let mut paths: Vec<SpaceTimePath> = Vec::with_capacity(n);
    let mut f_mins = Vec::with_capacity(n);
    for k in 0..n {
        let others: Vec<&SpaceTimePath> = paths.iter().collect();
        let q = LowLevelQuery { agent: k, start: starts[k], goal: goals[k], constraints: &[], others: &others };
        let r = low_level_search(&q, map, cfg, deadline).map_err(|e| match e {
            PlanError::Timeout { .. } => timeout(&stats),
            e => e,
        })?;
        stats.low_level_expanded += r.expanded;
        f_mins.push(r.f_min);
        paths.push(r.path);
    }
    let root = make_node(Vec::new(), paths, f_mins);

    let mut entries: Vec<HlEntry> = Vec::new();
    let mut open_lb: BTreeSet<(OrderedFloat<f64>, usize)> = BTreeSet::new();
    let mut open_cost: BTreeSet<(OrderedFloat<f64>, usize)> = BTreeSet::new();
    let mut focal: BTreeSet<(usize, OrderedFloat<f64>, usize)> = BTreeSet::new();
    let push = |entries: &mut Vec<HlEntry>,
                open_lb: &mut BTreeSet<(OrderedFloat<f64>, usize)>,
                open_cost: &mut BTreeSet<(OrderedFloat<f64>, usize)>,
                node: ConflictTreeNode| {
        let id = entries.len();
        open_lb.insert((OrderedFloat(node.lower_bound), id));
        open_cost.insert((OrderedFloat(node.cost), id));
        entries.push(HlEntry { node, open: true });
        id
    };
    let root_id = push(&mut entries, &mut open_lb, &mut open_cost, root);
    stats.high_level_generated = 1;
    let mut lb_min = entries[root_id].node.lower_bound;
    focal.insert((entries[root_id].node.conflict_count, OrderedFloat(entries[root_id].node.cost), root_id));

    loop {
        let Some(&(OrderedFloat(lo), _)) = open_lb.first() else {
            stats.elapsed = clock.elapsed();
            return Err(PlanError::Infeasible("conflict tree exhausted".into()));
        };
        if lo > lb_min {
            let old = cfg.omega * lb_min;
            let new = cfg.omega * lo;
            let admitted: Vec<usize> = open_cost
                .range((OrderedFloat(old), usize::MAX)..)
                .take_while(|(c, _)| admits(c.0, new))
                .map(|(_, id)| *id)
                .collect();
            for id in admitted {
                let nd = &entries[id].node;
                focal.insert((nd.conflict_count, OrderedFloat(nd.cost), id));
            }
            lb_min = lo;
        }
        stats.lower_bound_trace.push(lb_min);
        if stats.high_level_expanded >= cfg.max_high_level_nodes
            || deadline.is_some_and(|d| Instant::now() > d)
        {
            stats.elapsed = clock.elapsed();
            return Err(timeout(&stats));
        }
        let (_, _, id) = focal.pop_first().expect("focal holds the minimum-cost node");
        let entry = &mut entries[id];
        entry.open = false;
        open_lb.remove(&(OrderedFloat(entry.node.lower_bound), id));
        open_cost.remove(&(OrderedFloat(entry.node.cost), id));
        let Some(conflict) = get_first_conflict(&entry.node.solution) else {
            let node = std::mem::replace(&mut entry.node, make_node(Vec::new(), Vec::new(), Vec::new()));
            stats.elapsed = clock.elapsed();
            return Ok(MapfSolution { cost: node.cost, lower_bound: lb_min, paths: node.solution, stats });
        };
        stats.high_level_expanded += 1;
        let parent = entries[id].node.clone();
        for c in conflict.constraints() {
            let k = c.agent;
            let mut constraints = parent.constraints.clone();
            constraints.push(c);
            let others: Vec<&SpaceTimePath> =
                parent.solution.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, p)| p).collect();
            let q = LowLevelQuery { agent: k, start: starts[k], goal: goals[k], constraints: &constraints, others: &others };
            let r = match low_level_search(&q, map, cfg, deadline) {
                Ok(r) => r,
                Err(PlanError::Infeasible(_)) => continue,
                Err(PlanError::Timeout { .. }) => {
                    stats.elapsed = clock.elapsed();
                    return Err(timeout(&stats));
                }
                Err(e) => return Err(e),
            };
            stats.low_level_expanded += r.expanded;
            let mut solution = parent.solution.clone();
            let mut f_mins = parent.f_mins.clone();
            solution[k] = r.path;
            f_mins[k] = r.f_min.max(parent.f_mins[k]);
            let child = make_node(constraints, solution, f_mins);
            let admitted = admits(child.cost, cfg.omega * lb_min);
            let key = (child.conflict_count, OrderedFloat(child.cost));
            let cid = push(&mut entries, &mut open_lb, &mut open_cost, child);
            stats.high_level_generated += 1;
            if admitted {
                focal.insert((key.0, key.1, cid));
            }
        }
    }
}

fn make_node(constraints: Vec<Constraint>, solution: Vec<SpaceTimePath>, f_mins: Vec<f64>) -> ConflictTreeNode {
    let cost = solution.iter().map(|p| p.cost).sum();
    let lower_bound = f_mins.iter().sum();
    let conflict_count = count_conflicts(&solution);
    ConflictTreeNode { constraints, solution, f_mins, cost, lower_bound, conflict_count }
}

/// Static reachability over free 26-connected cells, searched best-first
/// toward the goal.
fn reachable(map: &GridMap3D, from: Cell, to: Cell) -> bool {
    let [nx, ny, _] = map.dims();
    let flat = |c: Cell| c.x as usize + nx * (c.y as usize + ny * c.z as usize);
    let mut seen = vec![false; map.cell_count()];
    seen[flat(from)] = true;
    let mut heap = BinaryHeap::from([Reverse((OrderedFloat(octile(from, to)), from))]);
    while let Some(Reverse((_, c))) = heap.pop() {
        if c == to {
            return true;
        }
        for &(dx, dy, dz) in &moves()[..26] {
            let n = c.offset(dx, dy, dz);
            if !map.is_blocked(n) && !std::mem::replace(&mut seen[flat(n)], true) {
                heap.push(Reverse((OrderedFloat(octile(n, to)), n)));
            }
        }
    }
    false
}

/// A benchmark instance: map file reference, endpoints and `omega`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapfInstance {
    pub map: String,
    pub starts: Vec<Cell>,
    pub goals: Vec<Cell>,
    pub omega: f64,
}

impl MapfInstance {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Writes `agent,t,x,y,z` rows with cell indices.
pub fn write_paths_csv<W: Write>(mut w: W, paths: &[SpaceTimePath]) -> Result<()> {
    writeln!(w, "agent,t,x,y,z")?;
    for (k, p) in paths.iter().enumerate() {
        for s in &p.states {
            writeln!(w, "{k},{},{},{},{}", s.t, s.cell.x, s.cell.y, s.cell.z)?;
        }
    }
    Ok(())
}

/// Exact optimum by A* in joint space with operator decomposition, under
/// the same cost model and conflict rules as [`plan`]. Exponential in the
/// agent count; meant as a reference on small instances.
///
/// Each agent carries a flag marking that it has stopped at its goal for
/// good; stopped agents pay nothing and keep blocking their cell.
pub fn joint_space_optimum(starts: &[Cell], goals: &[Cell], map: &GridMap3D, cfg: &MapfConfig) -> Option<f64> {
    let n = starts.len();
    let models: Vec<CostModel> =
        (0..n).map(|k| CostModel::new(map, cfg, starts[k], goals[k])).collect();
    // exact single-agent cost-to-go under the same cost model
    let h: Vec<FxHashMap<Cell, f64>> = (0..n)
        .map(|k| {
            let mut dist: FxHashMap<Cell, f64> = FxHashMap::from_iter([(goals[k], 0.0)]);
            let mut heap = BinaryHeap::from([Reverse((OrderedFloat(0.0), goals[k]))]);
            while let Some(Reverse((OrderedFloat(d), cell))) = heap.pop() {
                if d > dist[&cell] {
                    continue;
                }
                for &(dx, dy, dz) in &moves()[..26] {
                    let p = cell.offset(dx, dy, dz);
                    if map.is_blocked(p) {
                        continue;
                    }
                    let nd = d + models[k].step_cost(map, p, cell);
                    if dist.get(&p).is_none_or(|v| nd < *v) {
                        dist.insert(p, nd);
                        heap.push(Reverse((OrderedFloat(nd), p)));
                    }
                }
            }
            dist
        })
        .collect();
    #[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
    struct S {
        old: Vec<Cell>,
        new: Vec<Cell>,
        done: Vec<bool>,
        next: usize,
    }
    let hval = |s: &S| -> Option<f64> {
        let mut v = 0.0;
        for k in 0..n {
            if !s.done[k] {
                let at = if k < s.next { s.new[k] } else { s.old[k] };
                v += h[k].get(&at)?;
            }
        }
        Some(v)
    };
    let s0 = S { old: starts.to_vec(), new: starts.to_vec(), done: vec![false; n], next: 0 };
    let mut best: FxHashMap<S, f64> = FxHashMap::from_iter([(s0.clone(), 0.0)]);
    let mut heap = BinaryHeap::from([Reverse((OrderedFloat(hval(&s0)?), OrderedFloat(0.0), s0))]);
    while let Some(Reverse((_, OrderedFloat(g), s))) = heap.pop() {
        if g > best[&s] + 1e-12 {
            continue;
        }
        if s.next == 0 && s.done.iter().all(|d| *d) {
            return Some(g);
        }
        let k = s.next;
        let from = s.old[k];
        let mut options: Vec<(Cell, f64, bool)> = Vec::new();
        if s.done[k] {
            options.push((from, 0.0, true));
        } else {
            if from == goals[k] {
                options.push((from, 0.0, true));
            }
            for &(dx, dy, dz) in moves() {
                let to = from.offset(dx, dy, dz);
                if !map.is_blocked(to) {
                    options.push((to, models[k].step_cost(map, from, to), false));
                }
            }
        }
        for (to, cost, done) in options {
            let clash = (0..k).any(|j| s.new[j] == to || (s.old[j] == to && s.new[j] == from && from != to));
            if clash {
                continue;
            }
            let mut ns = s.clone();
            ns.new[k] = to;
            ns.done[k] = done;
            ns.next = k + 1;
            if ns.next == n {
                ns.old = ns.new.clone();
                ns.next = 0;
            }
            let ng = g + cost;
            if best.get(&ns).is_some_and(|v| *v <= ng + 1e-12) {
                continue;
            }
            let Some(hv) = hval(&ns) else { continue };
            best.insert(ns.clone(), ng);
            heap.push(Reverse((OrderedFloat(ng + hv), OrderedFloat(ng), ns)));
        }
    }
    None
}
