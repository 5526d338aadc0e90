//! Deterministic kinematic multi-agent simulator.
//!
//! Agents track their current trajectories perfectly. Every replan period
//! the coordinator senses, detects arrivals, evaluates replan triggers,
//! partitions the team, dispatches group and single solves, and then
//! advances the world in fixed steps while recording traces and safety
//! margins.

pub mod bench;
pub mod scenario;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::grid_map::{GridMap3D, Vec3};
use crate::group_plan::{group_check, select_core, solve_group, MemberInput, PartitionEvent, PipelineConfig};
use crate::joint_opt::FixedNeighbor;
use crate::minco::{BoundaryState, MincoTrajectory};
use crate::penalty::PenaltyWeights;

pub use scenario::{Scenario, Sensing};

/// Allowed shortfall of the clearances during execution (m).
pub const SAFETY_TOLERANCE: f64 = 1e-2;

/// A committed trajectory and its global start time.
#[derive(Clone, Debug)]
pub struct Plan {
    pub trajectory: MincoTrajectory,
    pub start: f64,
}

impl Plan {
    pub fn end(&self) -> f64 {
        self.start + self.trajectory.total_duration()
    }

    /// State at global time `t`, holding the end state afterwards.
    pub fn state_at(&self, t: f64) -> BoundaryState {
        self.trajectory.state((t - self.start).clamp(0.0, self.trajectory.total_duration()))
    }

    pub fn position_at(&self, t: f64) -> Vec3 {
        self.trajectory.position((t - self.start).clamp(0.0, self.trajectory.total_duration()))
    }
}

/// Five-point Gauss-Legendre integral of `f(piece, local_t)` over the
/// trajectory-local interval `[a, b]`, split at piece boundaries.
fn integrate(traj: &MincoTrajectory, a: f64, b: f64, f: impl Fn(usize, f64) -> f64) -> f64 {
    const X: [f64; 5] = [0.0, -0.538_469_310_105_683_1, 0.538_469_310_105_683_1, -0.906_179_845_938_664, 0.906_179_845_938_664];
    const W: [f64; 5] = [0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1, 0.236_926_885_056_189_1];
    let mut acc = 0.0;
    let mut t0 = 0.0;
    for (i, &d) in traj.durations().iter().enumerate() {
        let (lo, hi) = (a.max(t0), b.min(t0 + d));
        if hi > lo {
            let (c, h) = (0.5 * (lo + hi) - t0, 0.5 * (hi - lo));
            acc += h * X.iter().zip(W).map(|(x, w)| w * f(i, c + h * x)).sum::<f64>();
        }
        t0 += d;
    }
    acc
}

/// `int ||jerk||^2` over `[a, b]` of trajectory-local time.
pub fn jerk_squared_integral(traj: &MincoTrajectory, a: f64, b: f64) -> f64 {
    integrate(traj, a, b, |i, t| traj.piece_derivative(i, t, 3).norm_squared())
}

/// Arc length over `[a, b]` of trajectory-local time.
pub fn arc_length(traj: &MincoTrajectory, a: f64, b: f64) -> f64 {
    integrate(traj, a, b, |i, t| traj.piece_derivative(i, t, 1).norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanReason {
    Initial,
    Periodic,
    Goal,
    Obstacle,
    Conflict,
    Partition,
    Recovery,
}

/// A part of a trajectory that was actually flown, in trajectory-local time.
#[derive(Clone, Debug)]
pub struct ExecutedSegment {
    pub trajectory: MincoTrajectory,
    pub from: f64,
    pub to: f64,
}

#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: usize,
    pub goals: Vec<Vec3>,
    pub goal_index: usize,
    pub plan: Option<Plan>,
    pub state: BoundaryState,
    pub finished_at: Option<f64>,
    pub distance: f64,
    pub jerk_integral: f64,
    pub replans: Vec<(f64, ReplanReason)>,
    pub executed: Vec<ExecutedSegment>,
    /// Own map knowledge under local sensing.
    pub known: Option<GridMap3D>,
    pub in_group: bool,
    last_plan: f64,
}

impl AgentState {
    pub fn new(id: usize, start: Vec3, goals: Vec<Vec3>) -> Self {
        Self {
            id,
            goals,
            goal_index: 0,
            plan: None,
            state: BoundaryState::at_rest(start),
            finished_at: None,
            distance: 0.0,
            jerk_integral: 0.0,
            replans: Vec::new(),
            executed: Vec::new(),
            known: None,
            in_group: false,
            last_plan: 0.0,
        }
    }

    pub fn current_goal(&self) -> Option<Vec3> {
        self.goals.get(self.goal_index).copied()
    }

    /// Commits a plan starting at `now`.
    pub fn commit(&mut self, plan: Plan) {
        self.executed.push(ExecutedSegment { trajectory: plan.trajectory.clone(), from: 0.0, to: 0.0 });
        self.plan = Some(plan);
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub time: f64,
    pub agents: Vec<AgentState>,
}

impl World {
    /// Advances every agent along its plan by `dt` (perfect tracking).
    /// Agents without a plan hold their position.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(PlanError::Config(format!("dt must be positive, got {dt}")));
        }
        let (t0, t1) = (self.time, self.time + dt);
        for a in &mut self.agents {
            let Some(plan) = &a.plan else { continue };
            let (u0, u1) = (t0 - plan.start, t1 - plan.start);
            let total = plan.trajectory.total_duration();
            let (lo, hi) = (u0.clamp(0.0, total), u1.clamp(0.0, total));
            if hi > lo {
                a.jerk_integral += jerk_squared_integral(&plan.trajectory, lo, hi);
                a.distance += arc_length(&plan.trajectory, lo, hi);
                if let Some(seg) = a.executed.last_mut() {
                    seg.to = hi;
                }
            }
            a.state = plan.state_at(t1);
        }
        self.time = t1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub id: usize,
    /// Time of arrival at the last goal (s); absent when not reached.
    pub flight_time: Option<f64>,
    pub flight_distance: f64,
    pub jerk_integral: f64,
    pub replans: usize,
    pub replans_by_reason: BTreeMap<ReplanReason, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: String,
    pub seed: u64,
    pub success: bool,
    pub failure: Option<String>,
    pub sim_time: f64,
    pub agents: Vec<AgentMetrics>,
    pub group_activations: usize,
    /// Smallest E-metric distance between any two agents (m).
    pub min_pair_distance: Option<f64>,
    /// Smallest ground-truth obstacle distance of any agent (m).
    pub min_obstacle_distance: Option<f64>,
    /// Wall-clock time of every planner solve (s).
    pub solver_times: Vec<f64>,
    pub mapf_times: Vec<f64>,
}

impl Metrics {
    fn mean(v: impl Iterator<Item = f64>) -> f64 {
        let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 { f64::NAN } else { s / n as f64 }
    }

    pub fn mean_flight_time(&self) -> f64 {
        Self::mean(self.agents.iter().map(|a| a.flight_time.unwrap_or(f64::NAN)))
    }

    pub fn mean_flight_distance(&self) -> f64 {
        Self::mean(self.agents.iter().map(|a| a.flight_distance))
    }

    pub fn mean_jerk_integral(&self) -> f64 {
        Self::mean(self.agents.iter().map(|a| a.jerk_integral))
    }

    /// True when the run respected both clearances within tolerance.
    pub fn is_safe(&self, w: &PenaltyWeights) -> bool {
        self.min_pair_distance.is_none_or(|d| d >= w.swarm_clearance - SAFETY_TOLERANCE)
            && self.min_obstacle_distance.is_none_or(|d| d >= w.obstacle_clearance - SAFETY_TOLERANCE)
    }
}

/// One trace row of one agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub in_group: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: Metrics,
    pub traces: Vec<Vec<TraceSample>>,
    pub events: Vec<PartitionEvent>,
    pub world: World,
}

impl RunResult {
    /// Writes `agent_<id>.csv` traces, `summary.json` and
    /// `partition_events.jsonl` into `dir`.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (id, rows) in self.traces.iter().enumerate() {
            let mut w = BufWriter::new(File::create(dir.join(format!("agent_{id}.csv")))?);
            writeln!(w, "t,x,y,z,vx,vy,vz,group")?;
            for r in rows {
                let (p, v) = (r.position, r.velocity);
                writeln!(w, "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}", r.t, p.x, p.y, p.z, v.x, v.y, v.z, r.in_group as u8)?;
            }
        }
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.metrics)?)?;
        let mut w = BufWriter::new(File::create(dir.join("partition_events.jsonl"))?);
        for e in &self.events {
            crate::group_plan::write_partition_event(&mut w, e)?;
        }
        Ok(())
    }
}

struct ActiveGroup {
    members: Vec<usize>,
    formed: f64,
}

/// Smallest E-metric distance between two plans over `[from, to]`.
fn plan_separation(a: &Plan, b: &Plan, from: f64, to: f64, step: f64, w: &PenaltyWeights) -> f64 {
    let n = ((to - from) / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let t = (from + k as f64 * step).min(to);
            w.metric_distance(&a.position_at(t), &b.position_at(t))
        })
        .fold(f64::INFINITY, f64::min)
}

fn hover_plan(p: Vec3, now: f64) -> Plan {
    let s = BoundaryState::at_rest(p);
    Plan { trajectory: MincoTrajectory::jerk(s, s, Vec::new(), vec![1.0]).expect("hover trajectory"), start: now }
}

pub struct Simulation {
    pub scenario: Scenario,
    truth: GridMap3D,
    weights: PenaltyWeights,
    pipeline: PipelineConfig,
    pub world: World,
    groups: Vec<ActiveGroup>,
    phases: Vec<f64>,
    events: Vec<PartitionEvent>,
    traces: Vec<Vec<TraceSample>>,
    activations: usize,
    min_pair: Option<f64>,
    min_obstacle: Option<f64>,
    solver_times: Vec<f64>,
    mapf_times: Vec<f64>,
    failure: Option<String>,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self> {
        let mut truth = scenario.build_map()?;
        scenario.validate(&truth)?;
        truth.build_distance_field();
        let weights = scenario.effective_weights();
        let pipeline = scenario.effective_pipeline();
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let phases = scenario.agents.iter().map(|_| rng.random_range(0.0..scenario.replan.refresh)).collect();
        let agents = scenario
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut st = AgentState::new(i, Vec3::from(a.start), a.goals.iter().map(|g| Vec3::from(*g)).collect());
                if matches!(scenario.sensing, Sensing::Local { .. }) {
                    st.known = Some(GridMap3D::new(truth.origin(), truth.dims(), truth.resolution()).expect("truth dims"));
                }
                st
            })
            .collect();
        let n = scenario.agents.len();
        Ok(Self {
            scenario,
            truth,
            weights,
            pipeline,
            world: World { time: 0.0, agents },
            groups: Vec::new(),
            phases,
            events: Vec::new(),
            traces: vec![Vec::new(); n],
            activations: 0,
            min_pair: None,
            min_obstacle: None,
            solver_times: Vec::new(),
            mapf_times: Vec::new(),
            failure: None,
        })
    }

    pub fn weights(&self) -> &PenaltyWeights {
        &self.weights
    }

    pub fn truth(&self) -> &GridMap3D {
        &self.truth
    }

    fn all_finished(&self) -> bool {
        self.world.agents.iter().all(|a| a.finished_at.is_some())
    }

    /// Runs until every agent is done, the timeout passes, or a failure.
    pub fn run(mut self) -> Result<RunResult> {
        self.record();
        while self.failure.is_none() && !self.all_finished() {
            if self.world.time >= self.scenario.timeout {
                self.failure = Some(format!("timeout at {:.2} s", self.world.time));
                break;
            }
            self.cycle()?;
            if self.failure.is_some() {
                break;
            }
            let steps = (self.scenario.replan.period / self.scenario.dt).round().max(1.0) as usize;
            for _ in 0..steps {
                self.world.step(self.scenario.dt)?;
                self.record();
                if self.failure.is_some() {
                    break;
                }
            }
        }
        Ok(self.finish())
    }

    fn record(&mut self) {
        let now = self.world.time;
        let w = &self.weights;
        let agents = &self.world.agents;
        for (i, a) in agents.iter().enumerate() {
            self.traces[i].push(TraceSample { t: now, position: a.state.position, velocity: a.state.velocity, in_group: a.in_group });
            if self.truth.occupied_count() > 0 {
                let d = self.truth.distance_and_gradient(&a.state.position).map(|q| q.distance).unwrap_or(0.0);
                self.min_obstacle = Some(self.min_obstacle.map_or(d, |m| m.min(d)));
                if d < w.obstacle_clearance - SAFETY_TOLERANCE && self.failure.is_none() {
                    self.failure = Some(format!("agent {i} within {d:.3} m of an obstacle at {now:.2} s"));
                }
            }
            for (j, b) in agents.iter().enumerate().skip(i + 1) {
                let d = w.metric_distance(&a.state.position, &b.state.position);
                self.min_pair = Some(self.min_pair.map_or(d, |m| m.min(d)));
                if d < w.swarm_clearance - SAFETY_TOLERANCE && self.failure.is_none() {
                    self.failure = Some(format!("agents {i} and {j} {d:.3} m apart at {now:.2} s"));
                }
            }
        }
    }

    fn finish(self) -> RunResult {
        let agents = self
            .world
            .agents
            .iter()
            .map(|a| {
                let mut by = BTreeMap::new();
                for (_, r) in &a.replans {
                    *by.entry(*r).or_insert(0) += 1;
                }
                AgentMetrics {
                    id: a.id,
                    flight_time: a.finished_at,
                    flight_distance: a.distance,
                    jerk_integral: a.jerk_integral,
                    replans: a.replans.len(),
                    replans_by_reason: by,
                }
            })
            .collect();
        let metrics = Metrics {
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            success: self.failure.is_none(),
            failure: self.failure,
            sim_time: self.world.time,
            agents,
            group_activations: self.activations,
            min_pair_distance: self.min_pair,
            min_obstacle_distance: self.min_obstacle,
            solver_times: self.solver_times,
            mapf_times: self.mapf_times,
        };
        RunResult { metrics, traces: self.traces, events: self.events, world: self.world }
    }

    /// Plan of agent `i` as seen by others: its trajectory or a hover.
    fn broadcast(&self, i: usize, now: f64) -> Plan {
        let a = &self.world.agents[i];
        a.plan.clone().unwrap_or_else(|| hover_plan(a.state.position, now))
    }

    /// Trajectories avoided by `members`. Agents that have no plan yet but
    /// are scheduled to plan this cycle are left out; they plan later in id
    /// order against the plans committed before them.
    fn neighbors_of(&self, members: &[usize], now: f64, scheduled: &BTreeMap<usize, ReplanReason>) -> Vec<FixedNeighbor> {
        let reach = 2.0 * self.scenario.horizon + 2.0;
        let agents = &self.world.agents;
        (0..agents.len())
            .filter(|j| !members.contains(j))
            .filter(|j| agents[*j].plan.is_some() || !scheduled.contains_key(j))
            .filter(|&j| members.iter().any(|&m| (agents[m].state.position - agents[j].state.position).norm() <= reach))
            .map(|j| {
                let p = self.broadcast(j, now);
                FixedNeighbor { trajectory: p.trajectory, time_offset: p.start - now }
            })
            .collect()
    }

    /// True when agent `i`'s remaining plan keeps both clearances against
    /// its map knowledge and the other agents' plans.
    fn plan_is_safe(&self, i: usize, now: f64) -> bool {
        let a = &self.world.agents[i];
        let Some(plan) = &a.plan else { return true };
        if plan.end() <= now {
            return true;
        }
        let w = &self.weights;
        let map = a.known.as_ref().unwrap_or(&self.truth);
        let n = ((plan.end() - now) / 0.05).ceil() as usize;
        let pts: Vec<Vec3> = (0..=n).map(|k| plan.position_at(now + k as f64 * 0.05)).collect();
        let clear = |p: &Vec3| {
            let c = map.world_to_cell_clamped(p);
            let r = ((w.obstacle_clearance - SAFETY_TOLERANCE) / map.resolution()).ceil() as i32;
            map.occupied_cells_near(c, r).all(|o| (map.cell_to_world(o) - p).norm() >= w.obstacle_clearance - SAFETY_TOLERANCE)
        };
        if !pts.iter().all(clear) {
            return false;
        }
        (0..self.world.agents.len()).filter(|&j| j != i).all(|j| {
            let other = self.broadcast(j, now);
            plan_separation(plan, &other, now, plan.end(), 0.05, w) >= w.swarm_clearance - SAFETY_TOLERANCE
        })
    }

    fn cycle(&mut self) -> Result<()> {
        let now = self.world.time;
        let n = self.world.agents.len();
        let mut triggers: BTreeMap<usize, ReplanReason> = BTreeMap::new();
        let w = self.weights.clone();

        // sensing
        if let Sensing::Local { range } = self.scenario.sensing {
            for a in self.world.agents.iter_mut().filter(|a| a.finished_at.is_none()) {
                let known = a.known.as_mut().expect("local sensing keeps a map");
                let fresh = known.observe(&self.truth, &a.state.position, range)?;
                if fresh.is_empty() {
                    continue;
                }
                if let Some(plan) = &a.plan {
                    let reach = w.obstacle_clearance - SAFETY_TOLERANCE;
                    let k = ((plan.end() - now).max(0.0) / 0.05).ceil() as usize;
                    let hit = (0..=k).any(|s| {
                        let p = plan.position_at(now + s as f64 * 0.05);
                        fresh.iter().any(|c| (known.cell_to_world(*c) - p).norm() < reach)
                    });
                    if hit {
                        triggers.insert(a.id, ReplanReason::Obstacle);
                    }
                }
            }
        }

        // arrivals
        let rp = &self.scenario.replan;
        for a in self.world.agents.iter_mut().filter(|a| a.finished_at.is_none()) {
            let goal = a.current_goal().expect("unfinished agent has a goal");
            if (a.state.position - goal).norm() <= rp.arrival_tolerance && a.state.velocity.norm() <= rp.arrival_speed {
                a.goal_index += 1;
                if a.goal_index == a.goals.len() {
                    a.finished_at = Some(now);
                    triggers.remove(&a.id);
                } else {
                    triggers.insert(a.id, ReplanReason::Goal);
                }
            }
        }

        // conflicts between committed plans
        let lookahead = self.scenario.horizon / self.weights.max_velocity;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&self.world.agents[i], &self.world.agents[j]);
                if (a.state.position - b.state.position).norm() > 2.0 * self.scenario.horizon {
                    continue;
                }
                if a.plan.is_none() && b.plan.is_none() {
                    continue;
                }
                let (pa, pb) = (self.broadcast(i, now), self.broadcast(j, now));
                let to = now + lookahead.min(pa.end().max(pb.end()) - now).max(0.0);
                if plan_separation(&pa, &pb, now, to, 0.1, &w) < w.swarm_clearance - SAFETY_TOLERANCE {
                    for k in [i, j] {
                        if self.world.agents[k].finished_at.is_none() {
                            triggers.entry(k).or_insert(ReplanReason::Conflict);
                        }
                    }
                }
            }
        }

        // group bookkeeping
        let refresh = self.scenario.replan.refresh;
        let mut dissolved: Vec<Vec<usize>> = Vec::new();
        let agents = &self.world.agents;
        self.groups.retain(|g| {
            let keep = now - g.formed < refresh
                && g.members.iter().all(|m| agents[*m].finished_at.is_none() && !triggers.contains_key(m));
            if !keep {
                dissolved.push(g.members.clone());
            }
            keep
        });
        for g in &dissolved {
            for &m in g {
                self.world.agents[m].in_group = false;
            }
        }
        let free: Vec<(usize, Vec3)> = self
            .world
            .agents
            .iter()
            .filter(|a| a.finished_at.is_none() && !a.in_group)
            .map(|a| (a.id, a.state.position))
            .collect();
        let partition = group_check(&free, &self.scenario.group);
        let mut new_groups = Vec::new();
        for g in partition.groups {
            let continuing = dissolved.contains(&g);
            if !continuing {
                self.activations += 1;
                self.events.push(PartitionEvent { time: now, members: g.clone(), core: select_core(&g).expect("nonempty") });
            }
            for &m in &g {
                triggers.entry(m).or_insert(if continuing { ReplanReason::Periodic } else { ReplanReason::Partition });
            }
            new_groups.push(g);
        }
        for &i in &partition.isolated {
            let a = &self.world.agents[i];
            if dissolved.iter().any(|g| g.contains(&i)) {
                triggers.entry(i).or_insert(ReplanReason::Partition);
            } else if a.plan.is_none() {
                triggers.entry(i).or_insert(ReplanReason::Initial);
            } else if now - a.last_plan >= refresh {
                let plan = a.plan.as_ref().expect("checked");
                let goal = a.current_goal().expect("unfinished");
                let short = (plan.trajectory.tail().position - goal).norm() > 1e-9;
                if short {
                    triggers.entry(i).or_insert(ReplanReason::Periodic);
                }
            }
        }

        // group solves, falling back to single solves for failed groups
        let mut singles: Vec<usize> = partition.isolated.iter().copied().filter(|i| triggers.contains_key(i)).collect();
        for g in new_groups {
            if self.solve(&g, now, &triggers)? {
                for &m in &g {
                    self.world.agents[m].in_group = true;
                }
                self.groups.push(ActiveGroup { members: g, formed: now });
            } else {
                for m in g {
                    triggers.insert(m, ReplanReason::Recovery);
                    singles.push(m);
                }
            }
        }
        singles.sort_unstable();
        for i in singles {
            if !self.solve(&[i], now, &triggers)? && !self.plan_is_safe(i, now) {
                self.failure = Some(format!("emergency stop of agent {i} at {now:.2} s"));
                return Ok(());
            }
        }
        Ok(())
    }

    /// Plans `members` jointly and commits the result. Returns false when
    /// the planner found no safe solution; committed plans are kept then.
    fn solve(&mut self, members: &[usize], now: f64, triggers: &BTreeMap<usize, ReplanReason>) -> Result<bool> {
        let neighbors = self.neighbors_of(members, now, triggers);
        let inputs: Vec<MemberInput<'_>> = members
            .iter()
            .map(|&m| {
                let a = &self.world.agents[m];
                MemberInput {
                    id: m,
                    state: a.state,
                    goal: a.current_goal().expect("unfinished agent has a goal"),
                    map: a.known.as_ref().unwrap_or(&self.truth),
                }
            })
            .collect();
        let sol = match solve_group(&inputs, neighbors, &self.weights, &self.pipeline) {
            Ok(s) => s,
            Err(PlanError::Infeasible(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        self.solver_times.push((sol.mapf_time + sol.optimize_time).as_secs_f64());
        self.mapf_times.push(sol.mapf_time.as_secs_f64());
        if sol.emergency_stop {
            return Ok(false);
        }
        for (id, traj) in sol.trajectories {
            let reason = triggers.get(&id).copied().unwrap_or(ReplanReason::Periodic);
            let a = &mut self.world.agents[id];
            a.replans.push((now, reason));
            a.last_plan = if reason == ReplanReason::Initial { now - self.phases[id] } else { now };
            a.commit(Plan { trajectory: traj, start: now });
        }
        Ok(true)
    }
}

/// Builds and runs a scenario.
pub fn run(scenario: &Scenario) -> Result<RunResult> {
    Simulation::new(scenario.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quintic(a: Vec3, b: Vec3, t: f64) -> MincoTrajectory {
        MincoTrajectory::jerk(BoundaryState::at_rest(a), BoundaryState::at_rest(b), Vec::new(), vec![t]).unwrap()
    }

    #[test]
    fn step_semantics() {
        let tr = quintic(Vec3::zeros(), Vec3::new(3.0, 0.0, 0.0), 2.0);
        let mut idle = AgentState::new(0, Vec3::new(1.0, 1.0, 1.0), vec![Vec3::zeros()]);
        let mut moving = AgentState::new(1, Vec3::zeros(), vec![Vec3::new(3.0, 0.0, 0.0)]);
        moving.commit(Plan { trajectory: tr.clone(), start: 0.0 });
        idle.plan = None;
        let mut w = World { time: 0.0, agents: vec![idle, moving] };
        let mut half = w.clone();
        w.step(2.0).unwrap();
        assert_eq!(w.agents[0].state.position, Vec3::new(1.0, 1.0, 1.0));
        assert!((w.agents[1].state.position - Vec3::new(3.0, 0.0, 0.0)).norm() < 1e-12);
        half.step(1.0).unwrap();
        half.step(1.0).unwrap();
        assert!((half.agents[1].state.position - w.agents[1].state.position).norm() < 1e-12);
        assert!((half.agents[1].distance - 3.0).abs() < 1e-9);
        // min-jerk rest-to-rest: int j^2 = 720 L^2 / T^5
        let expect = 720.0 * 9.0 / 32.0;
        assert!((half.agents[1].jerk_integral - expect).abs() < 1e-9 * expect);
        assert!((w.agents[1].jerk_integral - expect).abs() < 1e-9 * expect);
        assert!(w.step(0.0).is_err());
    }

    #[test]
    fn straight_flight_is_direct() {
        let r = run(&scenario::straight_line()).unwrap();
        let m = &r.metrics;
        assert!(m.success, "{:?}", m.failure);
        let d = m.agents[0].flight_distance;
        assert!((10.0..=10.5).contains(&d), "{d}");
        assert!(m.agents[0].flight_time.unwrap() >= 10.0 / 1.7);
        assert_eq!(m.group_activations, 0);
    }

    #[test]
    fn reported_jerk_integral_matches_executed_quadrature() {
        let r = run(&scenario::straight_line()).unwrap();
        for a in &r.world.agents {
            // composite Simpson over each executed segment
            let total: f64 = a
                .executed
                .iter()
                .map(|s| {
                    let n = 2000;
                    let h = (s.to - s.from) / n as f64;
                    (0..=n)
                        .map(|k| {
                            let c = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                            c * s.trajectory.evaluate(s.from + k as f64 * h, 3).norm_squared()
                        })
                        .sum::<f64>()
                        * h
                        / 3.0
                })
                .sum();
            assert!((total - a.jerk_integral).abs() <= 1e-3 * total.max(1e-9), "{total} vs {}", a.jerk_integral);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let mut s = scenario::circle_exchange(4, 4.0, 3);
        s.timeout = 30.0;
        let a = run(&s).unwrap().metrics;
        let b = run(&s).unwrap().metrics;
        assert_eq!(
            (a.agents.clone(), a.group_activations, a.min_pair_distance, a.success),
            (b.agents.clone(), b.group_activations, b.min_pair_distance, b.success)
        );
        assert!(a.success, "{:?}", a.failure);
        assert!(a.group_activations > 0);
    }

    #[test]
    fn far_apart_agents_never_group() {
        let mut s = scenario::straight_line();
        s.map.size = [14.0, 20.0, 3.0];
        s.map.origin = [-2.0, -10.0, 0.0];
        s.agents.push(scenario::ScenarioAgent { start: [0.0, 8.0, 1.5], goals: vec![[10.0, 8.0, 1.5]] });
        let r = run(&s).unwrap();
        assert!(r.metrics.success, "{:?}", r.metrics.failure);
        assert_eq!(r.metrics.group_activations, 0);
        assert!(r.events.is_empty());
    }
}
