//! Finite-difference verification of the objective gradients.
//!
//! Every term is checked on its own against central differences of the
//! stacked `(q, tau)` objective. Instances are drawn at random and
//! redrawn until the term under test is active, so that hinge terms are
//! exercised inside their active region rather than at zero.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::grid_map::{GridMap3D, Vec3};
use crate::joint_opt::{joint_objective, AgentSpec, FixedNeighbor, GroupPlanProblem};
use crate::minco::{BoundaryState, MincoTrajectory};
use crate::penalty::{PenaltyWeights, Term, TermWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    /// Active instances checked per term.
    pub instances: usize,
    pub max_agents: usize,
    pub max_pieces: usize,
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted error, relative to the gradient's max-norm.
    pub tolerance: f64,
    pub seed: u64,
    /// Draws allowed per term before giving up on finding active instances.
    pub max_draws: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { instances: 50, max_agents: 4, max_pieces: 5, step: 1e-6, tolerance: 1e-5, seed: 0, max_draws: 5000 }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.max_agents < 2 || self.max_pieces == 0 {
            return Err(PlanError::Config("need instances, at least 2 agents and 1 piece".into()));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0) {
            return Err(PlanError::Config("step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome for one term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: Term,
    pub instances: usize,
    pub draws: usize,
    pub max_error: f64,
    pub mean_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub terms: Vec<TermReport>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    /// One line per term.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for t in &self.terms {
            s.push_str(&format!(
                "{:<12} {} instances={} draws={} max_err={:.3e} mean_err={:.3e}\n",
                t.term.name(),
                if t.passed { "PASS" } else { "FAIL" },
                t.instances,
                t.draws,
                t.max_error,
                t.mean_error
            ));
        }
        s
    }
}

/// `||fd - g||_inf / max(||g||_inf, tiny)` at the problem's initial point.
pub fn gradient_error(problem: &GroupPlanProblem<'_>, step: f64) -> f64 {
    let x = problem.initial_vector();
    let mut g = DVector::zeros(x.len());
    joint_objective(problem, &x, &mut g);
    let mut scratch = DVector::zeros(x.len());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let fp = joint_objective(problem, &xp, &mut scratch).0;
        let fm = joint_objective(problem, &xm, &mut scratch).0;
        worst = worst.max(((fp - fm) / (2.0 * step) - g[i]).abs());
    }
    worst / g.amax().max(f64::MIN_POSITIVE)
}

/// A random instance built around the term under test.
struct Instance {
    agents: Vec<AgentSpec>,
    initial: Vec<MincoTrajectory>,
    weights: PenaltyWeights,
    map: GridMap3D,
    neighbors: Vec<FixedNeighbor>,
}

const ARENA_LO: [f64; 3] = [0.0, 0.0, 0.0];
const ARENA_SIZE: [f64; 3] = [6.0, 6.0, 3.0];

fn random_state(rng: &mut ChaCha8Rng, position: Vec3) -> BoundaryState {
    let mut v = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
    BoundaryState { position, velocity: 0.5 * v(), acceleration: v() }
}

fn random_trajectory(rng: &mut ChaCha8Rng, a: Vec3, b: Vec3, pieces: usize) -> Result<MincoTrajectory> {
    let q = (1..pieces)
        .map(|k| {
            let j = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2));
            a.lerp(&b, k as f64 / pieces as f64) + j
        })
        .collect();
    let total = (b - a).norm() / rng.random_range(0.6..1.6);
    let t = (0..pieces).map(|_| total / pieces as f64 * rng.random_range(0.7..1.3)).collect();
    MincoTrajectory::jerk(random_state(rng, a), random_state(rng, b), q, t)
}

fn draw(term: Term, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let lo = Vec3::from(ARENA_LO);
    let size = Vec3::from(ARENA_SIZE);
    let center = lo + 0.5 * size;
    let min_agents = if term == Term::Reciprocal { 2 } else { 1 };
    let k = rng.random_range(min_agents..=cfg.max_agents);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let radius = rng.random_range(1.2..2.2);
    let mut ends = Vec::with_capacity(k);
    for i in 0..k {
        let ang = phase + std::f64::consts::TAU * i as f64 / k as f64;
        let dir = Vec3::new(ang.cos(), ang.sin(), 0.0);
        let z = |r: &mut ChaCha8Rng| r.random_range(-0.3..0.3);
        let a = center + radius * dir + Vec3::new(0.0, 0.0, z(rng));
        let b = center - radius * dir + Vec3::new(0.0, 0.0, z(rng));
        ends.push((a, b));
    }
    let mut map = GridMap3D::with_size(lo, size, 0.1)?;
    if term == Term::Obstacle {
        // pillars next to the straight routes
        for &(a, b) in &ends {
            let p = a.lerp(&b, rng.random_range(0.25..0.75));
            map.add_pillar((p.x + rng.random_range(-0.4..0.4), p.y + rng.random_range(-0.4..0.4)), rng.random_range(0.1..0.3));
        }
    }
    map.build_distance_field();
    let mut agents = Vec::with_capacity(k);
    let mut initial = Vec::with_capacity(k);
    for (id, &(a, b)) in ends.iter().enumerate() {
        let pieces = rng.random_range(1..=cfg.max_pieces);
        let tr = random_trajectory(rng, a, b, pieces)?;
        agents.push(AgentSpec { id, head: *tr.head(), tail: *tr.tail() });
        initial.push(tr);
    }
    let mut neighbors = Vec::new();
    if term == Term::Reciprocal && rng.random_bool(0.5) {
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = Vec3::new(ang.cos(), ang.sin(), 0.0);
        let pieces = rng.random_range(1..=3);
        neighbors.push(FixedNeighbor {
            trajectory: random_trajectory(rng, center + radius * dir, center - radius * dir, pieces)?,
            time_offset: rng.random_range(-0.5..0.5),
        });
    }
    let weights = PenaltyWeights {
        lambda: TermWeights::only(term),
        samples_per_piece: rng.random_range(4..=16),
        obstacle_clearance: rng.random_range(0.3..0.8),
        swarm_clearance: rng.random_range(0.5..1.0),
        max_velocity: rng.random_range(0.8..2.0),
        max_acceleration: rng.random_range(1.0..4.0),
        max_jerk: rng.random_range(2.0..10.0),
        ..PenaltyWeights::default()
    };
    Ok(Instance { agents, initial, weights, map, neighbors })
}

fn is_active(problem: &GroupPlanProblem<'_>, term: Term) -> bool {
    let x = problem.initial_vector();
    let mut g = DVector::zeros(x.len());
    let (f, bd) = joint_objective(problem, &x, &mut g);
    f.is_finite() && bd.get(term) > 1e-12 && g.amax() > 1e-9
}

/// Checks one term on `cfg.instances` active instances.
pub fn check_term(term: Term, cfg: &GradcheckConfig) -> Result<TermReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (term as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut errors = Vec::with_capacity(cfg.instances);
    let mut draws = 0;
    while errors.len() < cfg.instances {
        if draws >= cfg.max_draws {
            return Err(PlanError::Infeasible(format!(
                "{}: only {} active instances in {draws} draws",
                term.name(),
                errors.len()
            )));
        }
        draws += 1;
        let inst = draw(term, cfg, &mut rng)?;
        let mut problem = GroupPlanProblem::new(inst.agents, inst.initial, inst.weights, &inst.map);
        problem.neighbors = inst.neighbors;
        if !is_active(&problem, term) {
            continue;
        }
        errors.push(gradient_error(&problem, cfg.step));
    }
    let max_error = errors.iter().cloned().fold(0.0, f64::max);
    Ok(TermReport {
        term,
        instances: errors.len(),
        draws,
        max_error,
        mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
        passed: max_error <= cfg.tolerance,
    })
}

/// Checks every objective term.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let terms = Term::ALL.iter().map(|&t| check_term(t, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { terms, tolerance: cfg.tolerance, elapsed: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_passes_a_small_suite() {
        let cfg = GradcheckConfig { instances: 5, seed: 11, ..Default::default() };
        let report = run_gradcheck(&cfg).unwrap();
        assert!(report.passed(), "{}", report.summary());
        assert_eq!(report.terms.len(), 6);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // a huge step leaves the effort term's local quadratic regime
        let cfg = GradcheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = draw(Term::Effort, &cfg, &mut rng).unwrap();
        let problem = GroupPlanProblem::new(inst.agents, inst.initial, inst.weights, &inst.map);
        assert!(gradient_error(&problem, 1e-6) <= 1e-5);
        assert!(gradient_error(&problem, 0.5) > 1e-5);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(GradcheckConfig { max_agents: 1, ..Default::default() }.validate().is_err());
        assert!(GradcheckConfig { step: 0.0, ..Default::default() }.validate().is_err());
    }
}
