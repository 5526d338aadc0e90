//! Joint spatial-temporal optimization of a group of trajectories.
//!
//! Every agent's intermediate waypoints `q` and virtual times `tau`
//! (`T = exp(tau)`) are stacked into one vector and minimized with L-BFGS
//! against the weighted sum of the penalty terms. Results are post-checked
//! at a sampling density finer than the constraint points; unsafe results
//! are re-solved with the violated term's weight raised, and an emergency
//! stop is issued when retries run out.

pub mod lbfgs;

use std::cell::Cell as StdCell;
use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::grid_map::{GridMap3D, Vec3};
use crate::mapf::SpaceTimePath;
use crate::minco::{durations_from_tau, tau_from_durations, virtual_time_chain, BoundaryState, MincoTrajectory};
use crate::penalty::{
    control_effort, feasibility_penalty, neighbor_penalty, obstacle_penalty, reciprocal_penalty, time_cost,
    uniformity_penalty, Neighbor, PenaltyWeights, Term, TermEval,
};

use lbfgs::{minimize, LbfgsParams};

/// One group member: boundary states at the shared start time and at its
/// local goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: usize,
    pub head: BoundaryState,
    pub tail: BoundaryState,
}

/// A trajectory that is avoided but not optimized, e.g. a neighbor's
/// broadcast plan. `time_offset` is its start time minus the problem's
/// start time.
#[derive(Clone, Debug)]
pub struct FixedNeighbor {
    pub trajectory: MincoTrajectory,
    pub time_offset: f64,
}

/// Post-check acceptance slack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckTolerances {
    /// Allowed shortfall of obstacle and inter-agent clearance (m).
    pub distance: f64,
    /// Allowed relative excess over the dynamic limits.
    pub dynamics: f64,
}

impl Default for CheckTolerances {
    fn default() -> Self {
        Self { distance: 1e-3, dynamics: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Relative gradient tolerance: stop when `||g||_inf <= tol * max(1, |J|)`.
    pub gradient_tolerance: f64,
    pub memory: usize,
    pub retry_limit: usize,
    pub reweight_factor: f64,
    /// Post-check samples per constraint-point interval.
    pub check_density: usize,
    pub tolerances: CheckTolerances,
    /// Added to both clearances inside the objective so that residual
    /// penetration and the gaps between constraint points stay clear of the
    /// post-check thresholds (m).
    pub clearance_buffer: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-4,
            memory: 8,
            retry_limit: 3,
            reweight_factor: 10.0,
            check_density: 4,
            tolerances: CheckTolerances::default(),
            clearance_buffer: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupPlanProblem<'a> {
    pub agents: Vec<AgentSpec>,
    pub initial: Vec<MincoTrajectory>,
    pub weights: PenaltyWeights,
    pub map: &'a GridMap3D,
    pub solver: SolverConfig,
    /// Trajectories outside the group, avoided by every member.
    pub neighbors: Vec<FixedNeighbor>,
}

impl<'a> GroupPlanProblem<'a> {
    pub fn new(agents: Vec<AgentSpec>, initial: Vec<MincoTrajectory>, weights: PenaltyWeights, map: &'a GridMap3D) -> Self {
        Self { agents, initial, weights, map, solver: SolverConfig::default(), neighbors: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.agents.is_empty() || self.agents.len() != self.initial.len() {
            return Err(PlanError::Contract("need one initial trajectory per agent".into()));
        }
        for (a, tr) in self.agents.iter().zip(&self.initial) {
            if !self.map.contains_point(&a.tail.position) {
                return Err(PlanError::OutOfBounds(format!("agent {}: local goal outside the map", a.id)));
            }
            if tr.head() != &a.head || tr.tail() != &a.tail {
                return Err(PlanError::Contract(format!("agent {}: initial trajectory boundary mismatch", a.id)));
            }
        }
        if self.weights.lambda.obstacle > 0.0 && !self.map.has_distance_field() {
            return Err(PlanError::State("distance field not built".into()));
        }
        Ok(())
    }

    /// Stacked `(q, tau)` of the initial trajectories.
    pub fn initial_vector(&self) -> DVector<f64> {
        stack(&self.initial)
    }

    /// Trajectories encoded by a stacked vector.
    pub fn trajectories_from(&self, x: &DVector<f64>) -> Result<Vec<MincoTrajectory>> {
        let mut out = Vec::with_capacity(self.agents.len());
        let mut off = 0;
        for (a, tr) in self.agents.iter().zip(&self.initial) {
            let m = tr.piece_count();
            let q: Vec<Vec3> = (0..m - 1).map(|i| Vec3::new(x[off + 3 * i], x[off + 3 * i + 1], x[off + 3 * i + 2])).collect();
            off += 3 * (m - 1);
            let tau: Vec<f64> = x.rows(off, m).iter().copied().collect();
            off += m;
            out.push(MincoTrajectory::new(tr.order(), a.head, a.tail, q, durations_from_tau(&tau))?);
        }
        Ok(out)
    }
}

fn stack(trajs: &[MincoTrajectory]) -> DVector<f64> {
    let mut v = Vec::new();
    for tr in trajs {
        for q in tr.waypoints() {
            v.extend_from_slice(q.as_slice());
        }
        v.extend(tau_from_durations(tr.durations()));
    }
    DVector::from_vec(v)
}

/// Weighted value of every term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown(pub [f64; 6]);

impl Breakdown {
    pub fn get(&self, term: Term) -> f64 {
        self.0[term as usize]
    }

    fn add(&mut self, term: Term, v: f64) {
        self.0[term as usize] += v;
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Objective value, breakdown and per-agent `(c, T)` gradients.
fn evaluate_terms(
    trajs: &[MincoTrajectory],
    neighbors: &[FixedNeighbor],
    map: &GridMap3D,
    w: &PenaltyWeights,
) -> Result<(Breakdown, Vec<TermEval>)> {
    let lambda = &w.lambda;
    let mut grads: Vec<TermEval> = trajs.iter().map(TermEval::zeros).collect();
    let mut bd = Breakdown::default();
    let nb: Vec<Neighbor<'_>> =
        neighbors.iter().map(|n| Neighbor { traj: &n.trajectory, time_offset: n.time_offset }).collect();
    for (u, tr) in trajs.iter().enumerate() {
        let mut own = |term: Term, e: TermEval, grads: &mut [TermEval]| {
            let l = lambda.get(term);
            bd.add(term, l * e.value);
            grads[u].add_scaled(&e, l);
        };
        if lambda.effort > 0.0 {
            own(Term::Effort, control_effort(tr), &mut grads);
        }
        if lambda.time > 0.0 {
            own(Term::Time, time_cost(tr), &mut grads);
        }
        if lambda.feasibility > 0.0 {
            own(Term::Feasibility, feasibility_penalty(tr, w), &mut grads);
        }
        if lambda.obstacle > 0.0 {
            own(Term::Obstacle, obstacle_penalty(tr, map, w)?, &mut grads);
        }
        if lambda.uniformity > 0.0 {
            own(Term::Uniformity, uniformity_penalty(tr, w), &mut grads);
        }
        if lambda.reciprocal > 0.0 {
            if !nb.is_empty() {
                own(Term::Reciprocal, neighbor_penalty(tr, &nb, w), &mut grads);
            }
            if trajs.len() > 1 {
                let parts = reciprocal_penalty(trajs, u, w)?;
                bd.add(Term::Reciprocal, lambda.reciprocal * parts[u].value);
                for (g, p) in grads.iter_mut().zip(&parts) {
                    g.add_scaled(p, lambda.reciprocal);
                }
            }
        }
    }
    Ok((bd, grads))
}

/// Objective over the stacked `(q, tau)` vector. Writes the gradient and
/// returns the value with its breakdown; infeasible parameters give `+inf`.
pub fn joint_objective(problem: &GroupPlanProblem<'_>, x: &DVector<f64>, grad: &mut DVector<f64>) -> (f64, Breakdown) {
    let trajs = match problem.trajectories_from(x) {
        Ok(t) => t,
        Err(_) => return (f64::INFINITY, Breakdown::default()),
    };
    let buffer = problem.solver.clearance_buffer;
    let weights = PenaltyWeights {
        obstacle_clearance: problem.weights.obstacle_clearance + buffer,
        swarm_clearance: problem.weights.swarm_clearance + buffer,
        ..problem.weights.clone()
    };
    let Ok((bd, grads)) = evaluate_terms(&trajs, &problem.neighbors, problem.map, &weights) else {
        return (f64::INFINITY, Breakdown::default());
    };
    let mut off = 0;
    for (tr, g) in trajs.iter().zip(&grads) {
        let m = tr.piece_count();
        let Ok((dq, dt)) = tr.propagate_gradients(&g.dc, &g.dt) else {
            return (f64::INFINITY, bd);
        };
        for (i, d) in dq.iter().enumerate() {
            grad.fixed_rows_mut::<3>(off + 3 * i).copy_from(d);
        }
        off += 3 * (m - 1);
        let tau = tau_from_durations(tr.durations());
        for (i, v) in virtual_time_chain(&tau, &dt).into_iter().enumerate() {
            grad[off + i] = v;
        }
        off += m;
    }
    let f = bd.total();
    (if f.is_finite() { f } else { f64::INFINITY }, bd)
}

/// One row of the solver trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub terms: Breakdown,
    pub gradient_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub trajectories: Vec<MincoTrajectory>,
    pub objective: f64,
    pub breakdown: Breakdown,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// Minimizes the group objective from the problem's initial trajectories.
pub fn optimize(problem: &GroupPlanProblem<'_>) -> Result<SolveReport> {
    problem.validate()?;
    let last = StdCell::new(Breakdown::default());
    let mut objective = |x: &DVector<f64>, g: &mut DVector<f64>| {
        let (f, bd) = joint_objective(problem, x, g);
        last.set(bd);
        f
    };
    let params = LbfgsParams {
        memory: problem.solver.memory,
        max_iterations: problem.solver.max_iterations,
        gradient_tolerance: problem.solver.gradient_tolerance,
        ..LbfgsParams::default()
    };
    let mut trace = Vec::new();
    let out = minimize(&mut objective, problem.initial_vector(), &params, |it| {
        trace.push(TraceRow {
            iteration: it.iteration,
            objective: it.f,
            terms: last.get(),
            gradient_norm: it.gradient_norm,
            step: it.step,
        });
    })
    .map_err(|e| PlanError::Solver { reason: e.reason, iterations: e.iterations, last_iterate: e.x.as_slice().to_vec() })?;
    Ok(SolveReport {
        trajectories: problem.trajectories_from(&out.x)?,
        objective: out.f,
        breakdown: trace.last().map(|r| r.terms).unwrap_or_default(),
        iterations: out.iterations,
        evaluations: out.evaluations,
        converged: out.converged,
        trace,
    })
}

/// Writes the solver trace as CSV.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceRow]) -> Result<()> {
    write!(w, "iteration,objective")?;
    for t in Term::ALL {
        write!(w, ",{}", t.name())?;
    }
    writeln!(w, ",gradient_norm,step")?;
    for r in trace {
        write!(w, "{},{:e}", r.iteration, r.objective)?;
        for v in r.terms.0 {
            write!(w, ",{v:e}")?;
        }
        writeln!(w, ",{:e},{:e}", r.gradient_norm, r.step)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Obstacle { agent: usize, distance: f64 },
    Reciprocal { agents: (usize, usize), distance: f64 },
    Neighbor { agent: usize, distance: f64 },
    Velocity { agent: usize, value: f64 },
    Acceleration { agent: usize, value: f64 },
    Jerk { agent: usize, value: f64 },
}

impl Violation {
    /// Objective term that penalizes this violation.
    pub fn term(&self) -> Term {
        match self {
            Violation::Obstacle { .. } => Term::Obstacle,
            Violation::Reciprocal { .. } | Violation::Neighbor { .. } => Term::Reciprocal,
            Violation::Velocity { .. } | Violation::Acceleration { .. } | Violation::Jerk { .. } => Term::Feasibility,
        }
    }
}

/// Peak dynamic values of one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicPeaks {
    pub velocity: f64,
    pub acceleration: f64,
    pub jerk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    /// Per agent, distance-field value (m); infinite without obstacles.
    pub min_obstacle_distance: Vec<f64>,
    /// `(i, j, d)` for every pair of group members, E-metric distance (m).
    pub min_pair_distance: Vec<(usize, usize, f64)>,
    /// Per agent, E-metric distance to the closest fixed neighbor (m).
    pub min_neighbor_distance: Vec<f64>,
    pub peaks: Vec<DynamicPeaks>,
    pub violations: Vec<Violation>,
}

impl SafetyReport {
    pub fn is_safe(&self) -> bool {
        self.violations.is_empty()
    }

    /// Smallest clearance margin against `C_o` and `C_w` over all agents.
    pub fn min_clearance_margin(&self, w: &PenaltyWeights) -> f64 {
        let o = self.min_obstacle_distance.iter().map(|d| d - w.obstacle_clearance);
        let p = self.min_pair_distance.iter().map(|(_, _, d)| d - w.swarm_clearance);
        let n = self.min_neighbor_distance.iter().map(|d| d - w.swarm_clearance);
        o.chain(p).chain(n).fold(f64::INFINITY, f64::min)
    }
}

/// Samples of one trajectory over global time, holding its end state.
fn sample_times(total: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = (total / step).ceil().max(1.0) as usize;
    (0..=n).map(move |k| (k as f64 * step).min(total))
}

/// Dense safety check of a trajectory set.
pub fn post_check(
    trajs: &[MincoTrajectory],
    neighbors: &[FixedNeighbor],
    map: &GridMap3D,
    w: &PenaltyWeights,
    cfg: &SolverConfig,
) -> Result<SafetyReport> {
    let density = (cfg.check_density.max(1) * w.samples_per_piece) as f64;
    let tol = &cfg.tolerances;
    let mut report = SafetyReport {
        min_obstacle_distance: Vec::new(),
        min_pair_distance: Vec::new(),
        min_neighbor_distance: Vec::new(),
        peaks: Vec::new(),
        violations: Vec::new(),
    };
    let obstacles = map.occupied_count() > 0;
    if obstacles && !map.has_distance_field() {
        return Err(PlanError::State("distance field not built".into()));
    }
    for (u, tr) in trajs.iter().enumerate() {
        let mut dmin = f64::INFINITY;
        let mut peaks = DynamicPeaks { velocity: 0.0, acceleration: 0.0, jerk: 0.0 };
        for (i, &ti) in tr.durations().iter().enumerate() {
            let n = density as usize;
            for j in 0..=n {
                let t = ti * j as f64 / density;
                if obstacles {
                    let p = tr.piece_derivative(i, t, 0);
                    dmin = dmin.min(map.distance_and_gradient(&p)?.distance);
                }
                peaks.velocity = peaks.velocity.max(tr.piece_derivative(i, t, 1).norm());
                peaks.acceleration = peaks.acceleration.max(tr.piece_derivative(i, t, 2).norm());
                peaks.jerk = peaks.jerk.max(tr.piece_derivative(i, t, 3).norm());
            }
        }
        if dmin < w.obstacle_clearance - tol.distance {
            report.violations.push(Violation::Obstacle { agent: u, distance: dmin });
        }
        let slack = 1.0 + tol.dynamics;
        if peaks.velocity > w.max_velocity * slack {
            report.violations.push(Violation::Velocity { agent: u, value: peaks.velocity });
        }
        if peaks.acceleration > w.max_acceleration * slack {
            report.violations.push(Violation::Acceleration { agent: u, value: peaks.acceleration });
        }
        if peaks.jerk > w.max_jerk * slack {
            report.violations.push(Violation::Jerk { agent: u, value: peaks.jerk });
        }
        report.min_obstacle_distance.push(dmin);
        report.peaks.push(peaks);
    }
    // common time grid at the finest constraint-point spacing
    let step = trajs
        .iter()
        .chain(neighbors.iter().map(|n| &n.trajectory))
        .flat_map(|t| t.durations().iter().copied())
        .fold(f64::INFINITY, f64::min)
        / density;
    let horizon = trajs.iter().map(MincoTrajectory::total_duration).fold(0.0, f64::max);
    let at = |tr: &MincoTrajectory, t: f64| tr.position(t.clamp(0.0, tr.total_duration()));
    for i in 0..trajs.len() {
        for j in i + 1..trajs.len() {
            let d = sample_times(horizon, step)
                .map(|t| w.metric_distance(&at(&trajs[i], t), &at(&trajs[j], t)))
                .fold(f64::INFINITY, f64::min);
            if d < w.swarm_clearance - tol.distance {
                report.violations.push(Violation::Reciprocal { agents: (i, j), distance: d });
            }
            report.min_pair_distance.push((i, j, d));
        }
    }
    for (u, tr) in trajs.iter().enumerate() {
        let d = neighbors
            .iter()
            .flat_map(|n| {
                sample_times(tr.total_duration(), step)
                    .map(move |t| w.metric_distance(&at(tr, t), &at(&n.trajectory, t - n.time_offset)))
            })
            .fold(f64::INFINITY, f64::min);
        if d < w.swarm_clearance - tol.distance {
            report.violations.push(Violation::Neighbor { agent: u, distance: d });
        }
        report.min_neighbor_distance.push(d);
    }
    Ok(report)
}

/// Result of the retry loop.
#[derive(Clone, Debug)]
pub enum RetryOutcome {
    Safe { trajectories: Vec<MincoTrajectory>, retries: usize, weights: PenaltyWeights, report: SafetyReport },
    EmergencyStop { retries: usize, report: SafetyReport },
}

/// Raises the weight of every violated term by the configured factor and
/// re-solves from the last result, up to the retry limit.
pub fn reweight_and_retry(
    problem: &GroupPlanProblem<'_>,
    last: Vec<MincoTrajectory>,
    report: SafetyReport,
) -> Result<RetryOutcome> {
    let mut weights = problem.weights.clone();
    let mut current = last;
    let mut report = report;
    let mut retries = 0;
    while !report.is_safe() {
        if retries == problem.solver.retry_limit {
            return Ok(RetryOutcome::EmergencyStop { retries, report });
        }
        let mut terms: Vec<Term> = report.violations.iter().map(Violation::term).collect();
        terms.sort();
        terms.dedup();
        for t in terms {
            *weights.lambda.get_mut(t) *= problem.solver.reweight_factor;
        }
        retries += 1;
        let retry = GroupPlanProblem { initial: current.clone(), weights: weights.clone(), ..problem.clone() };
        current = match optimize(&retry) {
            Ok(r) => r.trajectories,
            Err(PlanError::Solver { last_iterate, .. }) => retry.trajectories_from(&DVector::from_vec(last_iterate))?,
            Err(e) => return Err(e),
        };
        report = post_check(&current, &problem.neighbors, problem.map, &weights, &problem.solver)?;
    }
    Ok(RetryOutcome::Safe { trajectories: current, retries, weights, report })
}

/// Full solve: optimize, post-check, and fall back to the retry loop.
#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub result: RetryOutcome,
    pub solve: Option<SolveReport>,
}

impl PlanOutcome {
    pub fn trajectories(&self) -> Option<&[MincoTrajectory]> {
        match &self.result {
            RetryOutcome::Safe { trajectories, .. } => Some(trajectories),
            RetryOutcome::EmergencyStop { .. } => None,
        }
    }
}

pub fn plan_checked(problem: &GroupPlanProblem<'_>) -> Result<PlanOutcome> {
    let (trajs, solve) = match optimize(problem) {
        Ok(r) => (r.trajectories.clone(), Some(r)),
        Err(PlanError::Solver { last_iterate, .. }) => {
            (problem.trajectories_from(&DVector::from_vec(last_iterate))?, None)
        }
        Err(e) => return Err(e),
    };
    let report = post_check(&trajs, &problem.neighbors, problem.map, &problem.weights, &problem.solver)?;
    let result = if report.is_safe() {
        RetryOutcome::Safe { trajectories: trajs, retries: 0, weights: problem.weights.clone(), report }
    } else {
        reweight_and_retry(problem, trajs, report)?
    };
    Ok(PlanOutcome { result, solve })
}

/// Settings for turning a discrete path into an initial trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub target_speed: f64,
    pub max_acceleration: f64,
    /// Pieces longer than this are split evenly.
    pub max_piece_length: Option<f64>,
    /// When set, every piece lasts at least its number of path timesteps
    /// times this value, keeping the discrete plan's timing.
    pub step_time: Option<f64>,
    pub min_duration: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { target_speed: 1.7, max_acceleration: 6.2, max_piece_length: None, step_time: None, min_duration: 0.05 }
    }
}

/// Arrival time at arc length `s` of a trapezoidal (or triangular) speed
/// profile over `total` metres from speed `v0` to `v1` with cruise speed
/// `vmax` and acceleration `a`.
pub fn trapezoid_time(s: f64, total: f64, v0: f64, v1: f64, vmax: f64, a: f64) -> f64 {
    let v0 = v0.min(vmax);
    let v1 = v1.min(vmax);
    let mut vp = vmax;
    let mut da = (vp * vp - v0 * v0) / (2.0 * a);
    let mut dd = (vp * vp - v1 * v1) / (2.0 * a);
    if da + dd > total {
        vp = ((2.0 * a * total + v0 * v0 + v1 * v1) / 2.0).sqrt().max(v0.max(v1));
        da = ((vp * vp - v0 * v0) / (2.0 * a)).max(0.0);
        dd = (total - da).max(0.0);
    }
    let s = s.clamp(0.0, total);
    let ta = (vp - v0) / a;
    if s <= da {
        return (-v0 + (v0 * v0 + 2.0 * a * s).sqrt()) / a;
    }
    let cruise = total - da - dd;
    if s <= da + cruise {
        return ta + (s - da) / vp;
    }
    // time remaining, measured back from the end of the deceleration
    let left = total - s;
    let remaining = (-v1 + (v1 * v1 + 2.0 * a * left).sqrt()) / a;
    ta + cruise / vp + (vp - v1) / a - remaining
}

/// Initial waypoints and durations from a discrete path: line-of-sight
/// pruning against `map`, optional splitting of long pieces, and durations
/// from a trapezoidal speed profile along the pruned polyline.
pub fn init_from_path(
    path: &SpaceTimePath,
    map: &GridMap3D,
    head: &BoundaryState,
    tail: &BoundaryState,
    cfg: &InitConfig,
) -> (Vec<Vec3>, Vec<f64>) {
    let mut pts = path.world_points(map);
    let steps: Vec<usize> = (0..pts.len()).collect();
    if pts.is_empty() {
        pts = vec![head.position];
    }
    pts[0] = head.position;
    let last = pts.len() - 1;
    pts[last] = tail.position;
    // greedy furthest-visible pruning
    let mut keep = vec![0usize];
    let mut i = 0;
    while i < last {
        let mut j = last;
        while j > i + 1 && !map.line_of_sight(&pts[i], &pts[j]) {
            j -= 1;
        }
        keep.push(j);
        i = j;
    }
    let mut nodes: Vec<(Vec3, f64)> = keep.iter().map(|&k| (pts[k], steps[k] as f64)).collect();
    if let Some(len) = cfg.max_piece_length {
        let mut split = vec![nodes[0]];
        for w in nodes.windows(2) {
            let n = ((w[1].0 - w[0].0).norm() / len).ceil().max(1.0) as usize;
            for k in 1..=n {
                let a = k as f64 / n as f64;
                split.push((w[0].0.lerp(&w[1].0, a), w[0].1 + a * (w[1].1 - w[0].1)));
            }
        }
        nodes = split;
    }
    if nodes.len() == 1 {
        nodes.push(nodes[0]);
    }
    let lengths: Vec<f64> = nodes.windows(2).map(|w| (w[1].0 - w[0].0).norm()).collect();
    let total: f64 = lengths.iter().sum();
    let (v0, v1) = (head.velocity.norm(), tail.velocity.norm());
    let mut s = 0.0;
    let mut prev = 0.0;
    let mut durations = Vec::with_capacity(lengths.len());
    for (k, l) in lengths.iter().enumerate() {
        s += l;
        let t = trapezoid_time(s, total, v0, v1, cfg.target_speed, cfg.max_acceleration);
        let mut d = (t - prev).max(cfg.min_duration);
        if let Some(dt) = cfg.step_time {
            d = d.max((nodes[k + 1].1 - nodes[k].1) * dt);
        }
        durations.push(d);
        prev = t;
    }
    let waypoints = nodes[1..nodes.len() - 1].iter().map(|n| n.0).collect();
    (waypoints, durations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_map::Cell;
    use crate::mapf::SpaceTimeState;
    use crate::penalty::TermWeights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rest(p: Vec3) -> BoundaryState {
        BoundaryState::at_rest(p)
    }

    fn empty_map() -> GridMap3D {
        let mut m = GridMap3D::new(Vec3::new(-5.0, -5.0, 0.0), [100, 100, 30], 0.2).unwrap();
        m.build_distance_field();
        m
    }

    fn straight_problem<'a>(map: &'a GridMap3D, a: Vec3, b: Vec3, pieces: usize, total: f64) -> GroupPlanProblem<'a> {
        let q = (1..pieces).map(|k| a.lerp(&b, k as f64 / pieces as f64)).collect();
        let tr = MincoTrajectory::jerk(rest(a), rest(b), q, vec![total / pieces as f64; pieces]).unwrap();
        GroupPlanProblem::new(
            vec![AgentSpec { id: 0, head: rest(a), tail: rest(b) }],
            vec![tr],
            PenaltyWeights::default(),
            map,
        )
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let mut map = GridMap3D::new(Vec3::new(-1.0, -3.0, 0.0), [60, 60, 20], 0.1).unwrap();
        map.add_pillar((2.0, 0.1), 0.2);
        map.build_distance_field();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut trajs = Vec::new();
        let mut agents = Vec::new();
        for k in 0..3 {
            let a = Vec3::new(0.0, -0.6 + 0.6 * k as f64, 1.0);
            let b = Vec3::new(4.0, 0.6 - 0.6 * k as f64, 1.0 + 0.1 * k as f64);
            let m = 2 + k;
            let q = (1..m)
                .map(|i| a.lerp(&b, i as f64 / m as f64) + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0))
                .collect();
            let t = (0..m).map(|_| rng.random_range(0.8..1.4)).collect();
            trajs.push(MincoTrajectory::jerk(rest(a), rest(b), q, t).unwrap());
            agents.push(AgentSpec { id: k, head: rest(a), tail: rest(b) });
        }
        let weights = PenaltyWeights { max_velocity: 1.0, max_acceleration: 2.0, max_jerk: 4.0, ..Default::default() };
        let mut problem = GroupPlanProblem::new(agents, trajs, weights, &map);
        problem.neighbors.push(FixedNeighbor {
            trajectory: MincoTrajectory::jerk(rest(Vec3::new(3.0, 0.0, 1.0)), rest(Vec3::new(1.0, 0.0, 1.0)), vec![], vec![3.0]).unwrap(),
            time_offset: -0.5,
        });
        let x = problem.initial_vector();
        let mut g = DVector::zeros(x.len());
        let (f, bd) = joint_objective(&problem, &x, &mut g);
        for t in Term::ALL {
            assert!(bd.get(t) > 0.0, "{t:?} inactive");
        }
        let h = 1e-6;
        let mut scratch = DVector::zeros(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (joint_objective(&problem, &xp, &mut scratch).0 - joint_objective(&problem, &xm, &mut scratch).0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0) + 1e-7 * f, "x[{i}] fd {fd} an {}", g[i]);
        }
    }

    #[test]
    fn single_agent_matches_closed_form_optimum() {
        let map = empty_map();
        let (a, b) = (Vec3::new(0.0, 0.0, 2.0), Vec3::new(3.0, 0.0, 2.0));
        let mut problem = straight_problem(&map, a, b, 3, 6.0);
        problem.weights.lambda.uniformity = 0.0;
        problem.solver.gradient_tolerance = 1e-8;
        let report = optimize(&problem).unwrap();
        let bd = report.breakdown;
        for t in [Term::Obstacle, Term::Reciprocal, Term::Feasibility] {
            assert_eq!(bd.get(t), 0.0, "{t:?}");
        }
        // min-jerk rest-to-rest over L in time T: Je = 720 L^2 / T^5
        let (le, lt, l) = (problem.weights.lambda.effort, problem.weights.lambda.time, 3.0f64);
        let t_star = (5.0 * 720.0 * le * l * l / lt).powf(1.0 / 6.0);
        let j_star = le * 720.0 * l * l / t_star.powi(5) + lt * t_star;
        assert!((report.objective - j_star).abs() <= 0.01 * j_star, "{} vs {j_star}", report.objective);
        let total = report.trajectories[0].total_duration();
        assert!((total - t_star).abs() <= 0.01 * t_star, "{total} vs {t_star}");
        // monotone accepted objective
        assert!(report.trace.windows(2).all(|w| w[1].objective <= w[0].objective));
        let tr = &report.trajectories[0];
        assert!((tr.state(0.0).position - a).norm() < 1e-9);
        assert!((tr.state(tr.total_duration()).position - b).norm() < 1e-9);
        assert!(tr.state(tr.total_duration()).velocity.norm() < 1e-9);
    }

    #[test]
    fn converged_solution_is_stationary() {
        let map = empty_map();
        let mut problem = straight_problem(&map, Vec3::new(0.0, 0.0, 2.0), Vec3::new(4.0, 1.0, 2.5), 3, 5.0);
        problem.solver.gradient_tolerance = 1e-6;
        let report = optimize(&problem).unwrap();
        assert!(report.converged);
        let x = stack(&report.trajectories);
        let mut g = DVector::zeros(x.len());
        let (f, _) = joint_objective(&problem, &x, &mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..10 {
            let d = DVector::from_fn(x.len(), |_, _| rng.random_range(-1.0..1.0)).normalize();
            let fp = joint_objective(&problem, &(&x + &d * h), &mut g.clone()).0;
            let fm = joint_objective(&problem, &(&x - &d * h), &mut g.clone()).0;
            let dd = (fp - fm) / (2.0 * h);
            assert!(dd.abs() <= 1e-6 * f.abs().max(1.0) * 10.0, "directional derivative {dd}");
        }
    }

    #[test]
    fn head_on_pair_separates_symmetrically() {
        let map = empty_map();
        let (a, b) = (Vec3::new(0.0, 0.0, 2.0), Vec3::new(6.0, 0.0, 2.0));
        let mk = |s: Vec3, e: Vec3| {
            // tiny lateral offsets break the exact symmetry of the saddle
            let q = vec![s.lerp(&e, 0.5) + Vec3::new(0.0, if s.x < e.x { 0.05 } else { -0.05 }, 0.0)];
            MincoTrajectory::jerk(rest(s), rest(e), q, vec![2.5, 2.5]).unwrap()
        };
        let problem = GroupPlanProblem::new(
            vec![AgentSpec { id: 0, head: rest(a), tail: rest(b) }, AgentSpec { id: 1, head: rest(b), tail: rest(a) }],
            vec![mk(a, b), mk(b, a)],
            PenaltyWeights::default(),
            &map,
        );
        let outcome = plan_checked(&problem).unwrap();
        let trajs = outcome.trajectories().expect("safe");
        let report = post_check(trajs, &[], &map, &problem.weights, &problem.solver).unwrap();
        let (_, _, d) = report.min_pair_distance[0];
        assert!(d >= problem.weights.swarm_clearance - 1e-3, "{d}");
        // mirror symmetry: agent 1 is agent 0 rotated by pi about the midpoint
        let mid = Vec3::new(3.0, 0.0, 2.0);
        for k in 0..=20 {
            let t = trajs[0].total_duration() * k as f64 / 20.0;
            let p0 = trajs[0].position(t) - mid;
            let p1 = trajs[1].position(t) - mid;
            assert!((Vec3::new(-p0.x, -p0.y, p0.z) - p1).norm() < 5e-2, "t={t}");
        }
    }

    #[test]
    fn post_check_examples() {
        let map = empty_map();
        let w = PenaltyWeights::default();
        let cfg = SolverConfig::default();
        let hover = |p: Vec3| MincoTrajectory::jerk(rest(p), rest(p), vec![], vec![2.0]).unwrap();
        let r = post_check(&[hover(Vec3::new(0.0, 0.0, 1.0)), hover(Vec3::new(3.0, 0.0, 1.0))], &[], &map, &w, &cfg).unwrap();
        assert!(r.is_safe());
        assert!(r.min_clearance_margin(&w) > 1.0);
        let r = post_check(&[hover(Vec3::new(0.0, 0.0, 1.0)), hover(Vec3::new(0.1, 0.0, 1.0))], &[], &map, &w, &cfg).unwrap();
        assert!(matches!(r.violations[0], Violation::Reciprocal { agents: (0, 1), .. }));
        // line grazing a pillar at exactly C_o from its nearest occupied cell center
        let mut m = GridMap3D::new(Vec3::new(-5.0, -5.0, 0.0), [100, 100, 30], 0.1).unwrap();
        m.set_occupied(Cell::new(50, 50, 10)).unwrap();
        m.build_distance_field();
        let c = m.cell_to_world(Cell::new(50, 50, 10));
        let y = c.y + w.obstacle_clearance;
        let tr = MincoTrajectory::jerk(rest(Vec3::new(c.x - 2.0, y, c.z)), rest(Vec3::new(c.x + 2.0, y, c.z)), vec![], vec![5.0]).unwrap();
        let r = post_check(&[tr], &[], &m, &w, &cfg).unwrap();
        let margin = r.min_obstacle_distance[0] - w.obstacle_clearance;
        assert!(margin.abs() < 1e-2, "{margin}");
    }

    #[test]
    fn retry_escalates_only_violated_terms() {
        let map = empty_map();
        let (a, b) = (Vec3::new(0.0, 0.0, 2.0), Vec3::new(6.0, 0.0, 2.0));
        let mut problem = GroupPlanProblem::new(
            vec![AgentSpec { id: 0, head: rest(a), tail: rest(b) }, AgentSpec { id: 1, head: rest(b), tail: rest(a) }],
            vec![
                MincoTrajectory::jerk(rest(a), rest(b), vec![Vec3::new(3.0, 0.05, 2.0)], vec![2.5, 2.5]).unwrap(),
                MincoTrajectory::jerk(rest(b), rest(a), vec![Vec3::new(3.0, -0.05, 2.0)], vec![2.5, 2.5]).unwrap(),
            ],
            PenaltyWeights::default(),
            &map,
        );
        // too weak to separate on the first solve
        problem.weights.lambda.reciprocal = 1.0;
        problem.solver.retry_limit = 8;
        let first = optimize(&problem).unwrap().trajectories;
        let report = post_check(&first, &[], &map, &problem.weights, &problem.solver).unwrap();
        assert!(!report.is_safe());
        match reweight_and_retry(&problem, first.clone(), report.clone()).unwrap() {
            RetryOutcome::Safe { retries, weights, .. } => {
                assert!(retries >= 1);
                let mut expect = problem.weights.lambda;
                expect.reciprocal *= 10f64.powi(retries as i32);
                assert_eq!(weights.lambda, expect);
            }
            RetryOutcome::EmergencyStop { .. } => panic!("expected recovery"),
        }
        let stuck = GroupPlanProblem { solver: SolverConfig { retry_limit: 0, ..problem.solver.clone() }, ..problem.clone() };
        assert!(matches!(reweight_and_retry(&stuck, first, report).unwrap(), RetryOutcome::EmergencyStop { retries: 0, .. }));
    }

    #[test]
    fn rejects_inconsistent_problems() {
        let map = empty_map();
        let mut p = straight_problem(&map, Vec3::new(0.0, 0.0, 2.0), Vec3::new(3.0, 0.0, 2.0), 1, 3.0);
        p.agents[0].tail.position.x = 2.0;
        assert!(matches!(optimize(&p), Err(PlanError::Contract(_))));
        let mut p = straight_problem(&map, Vec3::new(0.0, 0.0, 2.0), Vec3::new(3.0, 0.0, 2.0), 1, 3.0);
        p.weights.lambda = TermWeights { obstacle: -1.0, ..TermWeights::default() };
        assert!(matches!(optimize(&p), Err(PlanError::Config(_))));
        let bare = GridMap3D::new(Vec3::new(-5.0, -5.0, 0.0), [100, 100, 30], 0.2).unwrap();
        let p = straight_problem(&bare, Vec3::new(0.0, 0.0, 2.0), Vec3::new(3.0, 0.0, 2.0), 1, 3.0);
        assert!(matches!(optimize(&p), Err(PlanError::State(_))));
    }

    fn cell_path(cells: &[Cell]) -> SpaceTimePath {
        SpaceTimePath { states: cells.iter().enumerate().map(|(t, c)| SpaceTimeState { cell: *c, t }).collect(), cost: 0.0 }
    }

    #[test]
    fn init_examples() {
        let map = GridMap3D::new(Vec3::zeros(), [40, 20, 5], 1.0).unwrap();
        let cells: Vec<Cell> = (0..31).map(|x| Cell::new(x, 5, 2)).collect();
        let path = cell_path(&cells);
        let (a, b) = (map.cell_to_world(cells[0]), map.cell_to_world(cells[30]));
        let cfg = InitConfig { max_acceleration: 1e6, ..Default::default() };
        let (q, t) = init_from_path(&path, &map, &rest(a), &rest(b), &cfg);
        assert!(q.is_empty());
        assert_eq!(t.len(), 1);
        assert!((t[0] - 30.0 / 1.7).abs() < 1e-3, "{}", t[0]);
        // L-shaped path around a box at the inner corner
        let mut m = GridMap3D::new(Vec3::zeros(), [20, 20, 1], 1.0).unwrap();
        m.add_box(Vec3::new(0.0, 1.0, 0.0), Vec3::new(8.9, 19.9, 0.9));
        let mut cells: Vec<Cell> = (0..=9).map(|x| Cell::new(x, 0, 0)).collect();
        cells.extend((1..=15).map(|y| Cell::new(9, y, 0)));
        let path = cell_path(&cells);
        let (a, b) = (m.cell_to_world(cells[0]), m.cell_to_world(*cells.last().unwrap()));
        let (q, t) = init_from_path(&path, &m, &rest(a), &rest(b), &InitConfig::default());
        assert_eq!(q.len(), 1);
        assert!((q[0] - m.cell_to_world(Cell::new(9, 0, 0))).norm() < 1.5, "{:?}", q[0]);
        assert!(m.line_of_sight(&a, &q[0]) && m.line_of_sight(&q[0], &b));
        assert_eq!(t.len(), 2);
        // splitting and step timing
        let cfg = InitConfig { max_piece_length: Some(4.0), step_time: Some(1.0), ..Default::default() };
        let path = cell_path(&(0..13).map(|x| Cell::new(x, 5, 2)).collect::<Vec<_>>());
        let (a, b) = (map.cell_to_world(Cell::new(0, 5, 2)), map.cell_to_world(Cell::new(12, 5, 2)));
        let (q, t) = init_from_path(&path, &map, &rest(a), &rest(b), &cfg);
        assert_eq!(q.len(), 2);
        assert!(t.iter().all(|d| *d >= 4.0 - 1e-9));
    }

    #[test]
    fn trapezoid_profile() {
        // symmetric triangle: 2 m at a = 1 from rest peaks at sqrt(2)
        let t = trapezoid_time(2.0, 2.0, 0.0, 0.0, 10.0, 1.0);
        assert!((t - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((trapezoid_time(1.0, 2.0, 0.0, 0.0, 10.0, 1.0) - 2f64.sqrt()).abs() < 1e-12);
        // cruise dominates
        let t = trapezoid_time(10.0, 10.0, 0.0, 0.0, 1.0, 1.0);
        assert!((t - 11.0).abs() < 1e-12);
        let ts: Vec<f64> = (0..=20).map(|k| trapezoid_time(k as f64 * 0.5, 10.0, 0.3, 0.0, 1.0, 1.0)).collect();
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let map = empty_map();
        let problem = straight_problem(&map, Vec3::new(0.0, 0.0, 2.0), Vec3::new(3.0, 0.0, 2.0), 2, 4.0);
        let report = optimize(&problem).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &report.trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,objective,effort,time,feasibility,obstacle,reciprocal,uniformity,gradient_norm,step\n"));
        assert_eq!(text.lines().count(), report.trace.len() + 1);
    }

    #[test]
    fn solves_are_deterministic() {
        let map = empty_map();
        let problem = straight_problem(&map, Vec3::new(0.0, 0.0, 2.0), Vec3::new(4.0, 2.0, 2.0), 3, 5.0);
        let a = optimize(&problem).unwrap();
        let b = optimize(&problem).unwrap();
        assert_eq!(a.trace, b.trace);
    }
}
