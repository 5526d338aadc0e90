//! Objective terms for trajectory optimization.
//!
//! Each term returns its value with gradients in the coefficient /
//! duration space `(c, T)` of every trajectory it touches. Mapping those
//! onto waypoints and virtual times is done by
//! [`MincoTrajectory::propagate_gradients`] and
//! [`crate::minco::virtual_time_chain`].
//!
//! Continuous-time inequality constraints `G <= 0` are enforced softly at
//! `kappa + 1` evenly spaced constraint points per piece, integrated with
//! trapezoidal weights and a cubic hinge `max(G, 0)^3`.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::grid_map::{GridMap3D, Vec3};
use crate::minco::{basis_derivative, MincoTrajectory};

/// Weights `lambda` of the six objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub effort: f64,
    pub time: f64,
    pub feasibility: f64,
    pub obstacle: f64,
    pub reciprocal: f64,
    pub uniformity: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            effort: 1.0,
            time: 20.0,
            feasibility: 1e4,
            obstacle: 1e4,
            reciprocal: 1e4,
            uniformity: 1e2,
        }
    }
}

impl TermWeights {
    pub fn zero() -> Self {
        Self { effort: 0.0, time: 0.0, feasibility: 0.0, obstacle: 0.0, reciprocal: 0.0, uniformity: 0.0 }
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Effort => self.effort,
            Term::Time => self.time,
            Term::Feasibility => self.feasibility,
            Term::Obstacle => self.obstacle,
            Term::Reciprocal => self.reciprocal,
            Term::Uniformity => self.uniformity,
        }
    }

    pub fn get_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Effort => &mut self.effort,
            Term::Time => &mut self.time,
            Term::Feasibility => &mut self.feasibility,
            Term::Obstacle => &mut self.obstacle,
            Term::Reciprocal => &mut self.reciprocal,
            Term::Uniformity => &mut self.uniformity,
        }
    }

    /// Only `term` enabled, with unit weight.
    pub fn only(term: Term) -> Self {
        let mut w = Self::zero();
        *w.get_mut(term) = 1.0;
        w
    }
}

/// The six objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Effort,
    Time,
    Feasibility,
    Obstacle,
    Reciprocal,
    Uniformity,
}

impl Term {
    pub const ALL: [Term; 6] =
        [Term::Effort, Term::Time, Term::Feasibility, Term::Obstacle, Term::Reciprocal, Term::Uniformity];

    pub fn name(self) -> &'static str {
        match self {
            Term::Effort => "effort",
            Term::Time => "time",
            Term::Feasibility => "feasibility",
            Term::Obstacle => "obstacle",
            Term::Reciprocal => "reciprocal",
            Term::Uniformity => "uniformity",
        }
    }
}

/// Per-constraint hinge weights `chi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiWeights {
    pub velocity: f64,
    pub acceleration: f64,
    pub jerk: f64,
    pub obstacle: f64,
    pub reciprocal: f64,
}

impl Default for ChiWeights {
    fn default() -> Self {
        Self { velocity: 1.0, acceleration: 1.0, jerk: 1.0, obstacle: 1.0, reciprocal: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyWeights {
    pub lambda: TermWeights,
    pub chi: ChiWeights,
    /// Constraint-point intervals per piece.
    pub samples_per_piece: usize,
    /// Obstacle clearance `C_o` (m).
    pub obstacle_clearance: f64,
    /// Inter-agent clearance `C_w` (m, in the downwash metric).
    pub swarm_clearance: f64,
    pub max_velocity: f64,
    pub max_acceleration: f64,
    pub max_jerk: f64,
    /// Symmetric positive-definite downwash metric `E`.
    pub downwash: Matrix3<f64>,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            lambda: TermWeights::default(),
            chi: ChiWeights::default(),
            samples_per_piece: 16,
            obstacle_clearance: 0.4,
            swarm_clearance: 0.6,
            max_velocity: 1.7,
            max_acceleration: 6.2,
            max_jerk: 20.0,
            downwash: downwash_matrix(2.0),
        }
    }
}

/// `diag(1, 1, 1 / c^2)`: vertical separations count `1/c` as much.
pub fn downwash_matrix(c: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, 1.0 / (c * c)))
}

impl PenaltyWeights {
    pub fn validate(&self) -> Result<()> {
        let l = &self.lambda;
        let c = &self.chi;
        let all = [
            l.effort, l.time, l.feasibility, l.obstacle, l.reciprocal, l.uniformity, c.velocity,
            c.acceleration, c.jerk, c.obstacle, c.reciprocal,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(PlanError::Config("penalty weights must be non-negative".into()));
        }
        if self.samples_per_piece < 2 {
            return Err(PlanError::Config("need at least 2 samples per piece".into()));
        }
        if !(self.obstacle_clearance > 0.0 && self.swarm_clearance > 0.0) {
            return Err(PlanError::Config("clearances must be positive".into()));
        }
        if !(self.max_velocity > 0.0 && self.max_acceleration > 0.0 && self.max_jerk > 0.0) {
            return Err(PlanError::Config("dynamic limits must be positive".into()));
        }
        let e = &self.downwash;
        if (e - e.transpose()).abs().max() > 1e-12 || e.symmetric_eigenvalues().min() <= 0.0 {
            return Err(PlanError::Config("downwash matrix must be symmetric positive-definite".into()));
        }
        Ok(())
    }

    /// Downwash-metric distance.
    pub fn metric_distance(&self, a: &Vec3, b: &Vec3) -> f64 {
        let d = a - b;
        d.dot(&(self.downwash * d)).max(0.0).sqrt()
    }
}

/// Value and `(c, T)` gradients of a term on one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TermEval {
    pub value: f64,
    pub dc: DMatrix<f64>,
    pub dt: Vec<f64>,
}

impl TermEval {
    pub fn zeros(traj: &MincoTrajectory) -> Self {
        Self {
            value: 0.0,
            dc: DMatrix::zeros(traj.coefficients().nrows(), 3),
            dt: vec![0.0; traj.piece_count()],
        }
    }

    pub fn add_scaled(&mut self, other: &TermEval, w: f64) {
        self.value += w * other.value;
        self.dc += &other.dc * w;
        for (a, b) in self.dt.iter_mut().zip(&other.dt) {
            *a += w * b;
        }
    }

    /// Adds `scale * beta^(order)(t) dir^T` to the block of piece `i`.
    fn add_basis_outer(&mut self, ncoef: usize, piece: usize, t: f64, order: usize, scale: f64, dir: &Vec3) {
        let mut beta = [0.0; 16];
        let beta = &mut beta[..ncoef];
        basis_derivative(t, order, beta);
        let base = ncoef * piece;
        for (j, b) in beta.iter().enumerate() {
            if *b == 0.0 {
                continue;
            }
            let w = scale * b;
            self.dc[(base + j, 0)] += w * dir.x;
            self.dc[(base + j, 1)] += w * dir.y;
            self.dc[(base + j, 2)] += w * dir.z;
        }
    }
}

/// One constraint evaluated at a constraint point: value `g`, hinge weight
/// `chi`, and its derivatives `dg/dc_i = beta^(basis_order)(t) dir^T`,
/// `dg/dt`.
#[derive(Clone, Copy, Debug)]
pub struct ConstraintSample {
    pub g: f64,
    pub chi: f64,
    pub basis_order: usize,
    pub dir: Vec3,
    pub dg_dt: f64,
}

/// Trapezoidal quadrature weight of sample `j` of `kappa`.
#[inline]
pub fn trapezoid_weight(j: usize, kappa: usize) -> f64 {
    if j == 0 || j == kappa {
        0.5
    } else {
        1.0
    }
}

/// Integral-of-violation penalty with a cubic hinge. `constraint` is called
/// with `(piece, local time, trajectory)` and pushes its samples into the
/// provided buffer.
pub fn integral_penalty<F>(traj: &MincoTrajectory, kappa: usize, mut constraint: F) -> TermEval
where
    F: FnMut(usize, f64, &MincoTrajectory, &mut Vec<ConstraintSample>),
{
    let mut out = TermEval::zeros(traj);
    let ncoef = traj.piece_coeff_count();
    let mut buf = Vec::with_capacity(4);
    for (i, &ti) in traj.durations().iter().enumerate() {
        let step = ti / kappa as f64;
        let mut piece_value = 0.0;
        for j in 0..=kappa {
            let alpha = j as f64 / kappa as f64;
            let t = alpha * ti;
            buf.clear();
            constraint(i, t, traj, &mut buf);
            let quad = step * trapezoid_weight(j, kappa);
            for s in &buf {
                if s.g <= 0.0 || s.chi == 0.0 {
                    continue;
                }
                let g2 = s.g * s.g;
                piece_value += quad * s.chi * g2 * s.g;
                let dj_dg = 3.0 * quad * s.chi * g2;
                out.add_basis_outer(ncoef, i, t, s.basis_order, dj_dg, &s.dir);
                out.dt[i] += dj_dg * s.dg_dt * alpha;
            }
        }
        out.value += piece_value;
        out.dt[i] += piece_value / ti;
    }
    out
}

fn effort_gram(order: usize, t: f64) -> DMatrix<f64> {
    let n = 2 * order;
    let ff = |j: usize| ((j - order + 1)..=j).fold(1.0, |a, v| a * v as f64);
    DMatrix::from_fn(n, n, |j, k| {
        if j < order || k < order {
            0.0
        } else {
            let p = (j + k + 1 - 2 * order) as i32;
            ff(j) * ff(k) * t.powi(p) / p as f64
        }
    })
}

/// `Je = sum_i int_0^Ti ||p^(s)||^2 dt` in closed form.
pub fn control_effort(traj: &MincoTrajectory) -> TermEval {
    let mut out = TermEval::zeros(traj);
    let n = traj.piece_coeff_count();
    let s = traj.order();
    for (i, &ti) in traj.durations().iter().enumerate() {
        let q = effort_gram(s, ti);
        let c = traj.coefficients().rows(n * i, n);
        let qc = &q * c;
        out.value += c.component_mul(&qc).sum();
        out.dc.rows_mut(n * i, n).copy_from(&(qc * 2.0));
        out.dt[i] = traj.piece_derivative(i, ti, s).norm_squared();
    }
    out
}

/// `Jt = sum_i T_i`.
pub fn time_cost(traj: &MincoTrajectory) -> TermEval {
    let mut out = TermEval::zeros(traj);
    out.value = traj.total_duration();
    out.dt.iter_mut().for_each(|g| *g = 1.0);
    out
}

/// Velocity, acceleration and jerk limits as squared-norm constraints.
pub fn feasibility_penalty(traj: &MincoTrajectory, w: &PenaltyWeights) -> TermEval {
    let limits = [
        (1usize, w.max_velocity, w.chi.velocity),
        (2, w.max_acceleration, w.chi.acceleration),
        (3, w.max_jerk, w.chi.jerk),
    ];
    integral_penalty(traj, w.samples_per_piece, |i, t, tr, buf| {
        for &(n, limit, chi) in &limits {
            let d = tr.piece_derivative(i, t, n);
            let d_next = tr.piece_derivative(i, t, n + 1);
            buf.push(ConstraintSample {
                g: d.norm_squared() - limit * limit,
                chi,
                basis_order: n,
                dir: 2.0 * d,
                dg_dt: 2.0 * d_next.dot(&d),
            });
        }
    })
}

/// `G_o = C_o - d(p)` against the map's distance field.
pub fn obstacle_penalty(traj: &MincoTrajectory, map: &GridMap3D, w: &PenaltyWeights) -> Result<TermEval> {
    if !map.has_distance_field() {
        return Err(PlanError::State("distance field not built".into()));
    }
    Ok(integral_penalty(traj, w.samples_per_piece, |i, t, tr, buf| {
        let p = tr.piece_derivative(i, t, 0);
        // field presence checked above
        let q = map.distance_and_gradient(&p).expect("distance field built");
        let v = q.gradient;
        buf.push(ConstraintSample {
            g: w.obstacle_clearance - q.distance,
            chi: w.chi.obstacle,
            basis_order: 0,
            dir: -v,
            dg_dt: -v.dot(&tr.piece_derivative(i, t, 1)),
        });
    }))
}

/// Another agent's trajectory as seen from the agent being penalized.
#[derive(Clone, Copy, Debug)]
pub struct Neighbor<'a> {
    pub traj: &'a MincoTrajectory,
    /// Start time of `traj` minus start time of the penalized trajectory.
    pub time_offset: f64,
}

/// Location of a global stamp on a neighbor: piece, local time and whether
/// the local time still moves with the stamp.
fn locate_neighbor(traj: &MincoTrajectory, t: f64) -> (usize, f64, bool) {
    if t <= 0.0 {
        return (0, 0.0, false);
    }
    let mut rem = t;
    let m = traj.piece_count();
    for (n, &d) in traj.durations().iter().enumerate() {
        if rem < d || (n == m - 1 && rem <= d) {
            return (n, rem, true);
        }
        rem -= d;
    }
    (m - 1, traj.durations()[m - 1], false)
}

/// Core of the reciprocal penalty for agent `u`. When `other_grads` is
/// given, gradients are also emitted to every neighbor's `(c, T)`.
fn reciprocal_core(
    traj_u: &MincoTrajectory,
    neighbors: &[Neighbor<'_>],
    w: &PenaltyWeights,
    mut other_grads: Option<&mut [TermEval]>,
) -> TermEval {
    let mut out = TermEval::zeros(traj_u);
    if neighbors.is_empty() {
        return out;
    }
    let kappa = w.samples_per_piece;
    let e = &w.downwash;
    let cw2 = w.swarm_clearance * w.swarm_clearance;
    let chi = w.chi.reciprocal;
    let ncoef = traj_u.piece_coeff_count();
    let mut piece_start = 0.0;
    for (i, &ti) in traj_u.durations().iter().enumerate() {
        let step = ti / kappa as f64;
        let mut piece_value = 0.0;
        for j in 0..=kappa {
            let alpha = j as f64 / kappa as f64;
            let t = alpha * ti;
            let stamp = piece_start + t;
            let quad = step * trapezoid_weight(j, kappa);
            let pu = traj_u.piece_derivative(i, t, 0);
            let vu = traj_u.piece_derivative(i, t, 1);
            for (k, nb) in neighbors.iter().enumerate() {
                let (n, tk, moving) = locate_neighbor(nb.traj, stamp - nb.time_offset);
                let pk = nb.traj.piece_derivative(n, tk, 0);
                let diff = pu - pk;
                let ediff = e * diff;
                let g = cw2 - diff.dot(&ediff);
                if g <= 0.0 {
                    continue;
                }
                let g2 = g * g;
                piece_value += quad * chi * g2 * g;
                let dj_dg = 3.0 * quad * chi * g2;
                // dG/dt along u's own local time
                let dg_dt = -2.0 * ediff.dot(&vu);
                // dG/dt' along k's local time (zero once k is held still)
                let dg_dtk = if moving {
                    2.0 * ediff.dot(&nb.traj.piece_derivative(n, tk, 1))
                } else {
                    0.0
                };
                out.add_basis_outer(ncoef, i, t, 0, dj_dg, &(-2.0 * ediff));
                out.dt[i] += dj_dg * (dg_dt + dg_dtk) * alpha;
                for l in 0..i {
                    out.dt[l] += dj_dg * dg_dtk;
                }
                if let Some(grads) = other_grads.as_deref_mut() {
                    let gk = &mut grads[k];
                    gk.add_basis_outer(nb.traj.piece_coeff_count(), n, tk, 0, dj_dg, &(2.0 * ediff));
                    if moving {
                        for m in 0..n {
                            gk.dt[m] -= dj_dg * dg_dtk;
                        }
                    } else if stamp - nb.time_offset > 0.0 {
                        // held at the end state: local time equals the last duration
                        let last = nb.traj.piece_count() - 1;
                        let vk = nb.traj.piece_derivative(last, tk, 1);
                        gk.dt[last] += dj_dg * 2.0 * ediff.dot(&vk);
                    }
                }
            }
        }
        out.value += piece_value;
        out.dt[i] += piece_value / ti;
        piece_start += ti;
    }
    out
}

/// Reciprocal avoidance penalty of agent `u` against every other member of
/// a group sharing one start time. Returns one gradient block per agent;
/// the block of `u` holds its own gradients.
pub fn reciprocal_penalty(trajs: &[MincoTrajectory], u: usize, w: &PenaltyWeights) -> Result<Vec<TermEval>> {
    if u >= trajs.len() {
        return Err(PlanError::Contract(format!("agent {u} outside group of {}", trajs.len())));
    }
    let others: Vec<usize> = (0..trajs.len()).filter(|&k| k != u).collect();
    let neighbors: Vec<Neighbor<'_>> =
        others.iter().map(|&k| Neighbor { traj: &trajs[k], time_offset: 0.0 }).collect();
    let mut other_grads: Vec<TermEval> = others.iter().map(|&k| TermEval::zeros(&trajs[k])).collect();
    let own = reciprocal_core(&trajs[u], &neighbors, w, Some(&mut other_grads));
    let mut result: Vec<TermEval> = trajs.iter().map(TermEval::zeros).collect();
    for (g, &k) in other_grads.into_iter().zip(&others) {
        result[k] = g;
    }
    result[u] = own;
    Ok(result)
}

/// Avoidance of fixed neighbor trajectories (not optimized): gradients go
/// to `traj` only.
pub fn neighbor_penalty(traj: &MincoTrajectory, neighbors: &[Neighbor<'_>], w: &PenaltyWeights) -> TermEval {
    reciprocal_core(traj, neighbors, w, None)
}

/// Variance of squared distances between adjacent constraint points.
pub fn uniformity_penalty(traj: &MincoTrajectory, w: &PenaltyWeights) -> TermEval {
    let kappa = w.samples_per_piece;
    let m = traj.piece_count();
    // (piece, sample index)
    let mut pts: Vec<(usize, usize)> = Vec::with_capacity(m * kappa + 1);
    for i in 0..m {
        for j in 0..kappa {
            pts.push((i, j));
        }
    }
    pts.push((m - 1, kappa));
    let pos: Vec<Vec3> = pts
        .iter()
        .map(|&(i, j)| traj.piece_derivative(i, traj.durations()[i] * j as f64 / kappa as f64, 0))
        .collect();
    let d2: Vec<f64> = pos.windows(2).map(|w| (w[1] - w[0]).norm_squared()).collect();
    let mean = d2.iter().sum::<f64>() / d2.len() as f64;
    let mut out = TermEval::zeros(traj);
    out.value = d2.iter().map(|d| (d - mean).powi(2)).sum();
    // dJ/dp for every point
    let mut dp = vec![Vec3::zeros(); pos.len()];
    for (k, d) in d2.iter().enumerate() {
        let g = 2.0 * (d - mean);
        let diff = pos[k + 1] - pos[k];
        dp[k + 1] += 2.0 * g * diff;
        dp[k] -= 2.0 * g * diff;
    }
    let ncoef = traj.piece_coeff_count();
    for (&(i, j), g) in pts.iter().zip(&dp) {
        let alpha = j as f64 / kappa as f64;
        let t = alpha * traj.durations()[i];
        out.add_basis_outer(ncoef, i, t, 0, 1.0, g);
        out.dt[i] += g.dot(&traj.piece_derivative(i, t, 1)) * alpha;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minco::BoundaryState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rest(p: Vec3) -> BoundaryState {
        BoundaryState::at_rest(p)
    }

    fn line(a: Vec3, b: Vec3, t: f64) -> MincoTrajectory {
        MincoTrajectory::jerk(rest(a), rest(b), vec![], vec![t]).unwrap()
    }

    /// Constant-velocity segment: boundary velocities equal the chord rate.
    fn cruise(a: Vec3, b: Vec3, pieces: usize, t_each: f64) -> MincoTrajectory {
        let total = t_each * pieces as f64;
        let v = (b - a) / total;
        let head = BoundaryState { position: a, velocity: v, acceleration: Vec3::zeros() };
        let tail = BoundaryState { position: b, velocity: v, acceleration: Vec3::zeros() };
        let q = (1..pieces).map(|k| a + v * (k as f64 * t_each)).collect();
        MincoTrajectory::jerk(head, tail, q, vec![t_each; pieces]).unwrap()
    }

    fn fd_check_ct(traj: &MincoTrajectory, eval: impl Fn(&MincoTrajectory) -> f64, g: &TermEval) {
        // perturb through (q, T) and compare against propagated gradients
        let (dq, dt) = traj.propagate_gradients(&g.dc, &g.dt).unwrap();
        let h = 1e-6;
        for i in 0..traj.waypoints().len() {
            for a in 0..3 {
                let mut qp = traj.waypoints().to_vec();
                let mut qm = qp.clone();
                qp[i][a] += h;
                qm[i][a] -= h;
                let fd = (eval(&traj.with_parameters(qp, traj.durations().to_vec()).unwrap())
                    - eval(&traj.with_parameters(qm, traj.durations().to_vec()).unwrap()))
                    / (2.0 * h);
                assert!((fd - dq[i][a]).abs() <= 1e-5 * fd.abs().max(1.0), "q[{i}][{a}] fd {fd} an {}", dq[i][a]);
            }
        }
        for i in 0..traj.piece_count() {
            let mut tp = traj.durations().to_vec();
            let mut tm = tp.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (eval(&traj.with_parameters(traj.waypoints().to_vec(), tp).unwrap())
                - eval(&traj.with_parameters(traj.waypoints().to_vec(), tm).unwrap()))
                / (2.0 * h);
            assert!((fd - dt[i]).abs() <= 1e-5 * fd.abs().max(1.0), "T[{i}] fd {fd} an {}", dt[i]);
        }
    }

    fn random_traj(rng: &mut ChaCha8Rng, m: usize, span: f64) -> MincoTrajectory {
        let mut v = |s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        let head = BoundaryState { position: v(span), velocity: v(1.0), acceleration: v(1.0) };
        let tail = BoundaryState { position: v(span), velocity: v(1.0), acceleration: v(1.0) };
        let q = (0..m - 1).map(|_| v(span)).collect();
        let t = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
        MincoTrajectory::jerk(head, tail, q, t).unwrap()
    }

    #[test]
    fn inactive_integral_penalty_is_zero() {
        let traj = line(Vec3::zeros(), Vec3::x(), 1.0);
        let g = integral_penalty(&traj, 8, |_, _, _, buf| {
            buf.push(ConstraintSample { g: -1.0, chi: 1.0, basis_order: 0, dir: Vec3::x(), dg_dt: 1.0 })
        });
        assert_eq!(g.value, 0.0);
        assert!(g.dc.iter().all(|v| *v == 0.0) && g.dt.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_violation_integrates_to_duration() {
        let traj = line(Vec3::zeros(), Vec3::x(), 1.0);
        let g = integral_penalty(&traj, 4, |_, _, _, buf| {
            buf.push(ConstraintSample { g: 1.0, chi: 1.0, basis_order: 0, dir: Vec3::zeros(), dg_dt: 0.0 })
        });
        assert!((g.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cubic_hinge_is_smooth_across_activation() {
        // G(p) = x(t) - 0.5 straddles zero along the quintic
        let traj = line(Vec3::zeros(), Vec3::x(), 1.0);
        let eval = |tr: &MincoTrajectory| {
            integral_penalty(tr, 16, |i, t, tr, buf| {
                let p = tr.piece_derivative(i, t, 0);
                buf.push(ConstraintSample {
                    g: p.x - 0.5,
                    chi: 1.0,
                    basis_order: 0,
                    dir: Vec3::x(),
                    dg_dt: tr.piece_derivative(i, t, 1).x,
                });
            })
        };
        let two = MincoTrajectory::jerk(rest(Vec3::zeros()), rest(Vec3::x()), vec![Vec3::new(0.45, 0.1, 0.0)], vec![0.6, 0.7]).unwrap();
        for tr in [&traj, &two] {
            let g = eval(tr);
            assert!(g.value > 0.0);
            fd_check_ct(tr, |t| eval(t).value, &g);
        }
    }

    #[test]
    fn control_effort_of_min_jerk_quintic() {
        let traj = line(Vec3::zeros(), Vec3::x(), 1.0);
        let je = control_effort(&traj);
        assert!((je.value - 720.0).abs() < 720.0 * 1e-9);
        let still = line(Vec3::x(), Vec3::x(), 2.0);
        assert!(control_effort(&still).value.abs() < 1e-18);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in 1..=4 {
            let tr = random_traj(&mut rng, m, 2.0);
            fd_check_ct(&tr, |t| control_effort(t).value, &control_effort(&tr));
        }
    }

    #[test]
    fn time_cost_examples() {
        let traj = MincoTrajectory::jerk(rest(Vec3::zeros()), rest(Vec3::x()), vec![Vec3::zeros(), Vec3::zeros()], vec![1.0, 2.0, 3.0]).unwrap();
        let jt = time_cost(&traj);
        assert_eq!(jt.value, 6.0);
        assert_eq!(jt.dt, vec![1.0; 3]);
        assert!(jt.dc.iter().all(|v| *v == 0.0));
        let tau = [0.0, 0.0];
        assert_eq!(crate::minco::virtual_time_chain(&tau, &[1.0, 1.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn feasibility_examples() {
        let w = PenaltyWeights::default();
        let hover = line(Vec3::new(1.0, 1.0, 1.0), Vec3::new(1.0, 1.0, 1.0), 3.0);
        assert_eq!(feasibility_penalty(&hover, &w).value, 0.0);
        // constant speed 2 v_m: violation 3 v_m^2 everywhere
        let vm = w.max_velocity;
        let fast = |t_each: f64| cruise(Vec3::zeros(), Vec3::new(2.0 * vm * 2.0 * t_each, 0.0, 0.0), 2, t_each);
        let a = feasibility_penalty(&fast(1.0), &w).value;
        let expect = 2.0 * (3.0 * vm * vm).powi(3);
        assert!((a - expect).abs() < 1e-6 * expect, "{a} vs {expect}");
        assert!(feasibility_penalty(&fast(1.5), &w).value > a);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tight = PenaltyWeights { max_velocity: 0.5, max_acceleration: 1.0, max_jerk: 2.0, ..w };
        for m in 1..=3 {
            let tr = random_traj(&mut rng, m, 2.0);
            let g = feasibility_penalty(&tr, &tight);
            assert!(g.value > 0.0);
            fd_check_ct(&tr, |t| feasibility_penalty(t, &tight).value, &g);
        }
    }

    fn pillar_map(x: f64) -> GridMap3D {
        let mut m = GridMap3D::new(Vec3::new(-1.0, -2.0, 0.0), [60, 40, 10], 0.1).unwrap();
        m.add_pillar((x, 0.0), 0.15);
        m.build_distance_field();
        m
    }

    #[test]
    fn obstacle_penalty_behaviour() {
        let w = PenaltyWeights::default();
        let traj = line(Vec3::new(-0.5, 0.02, 0.5), Vec3::new(4.5, 0.02, 0.5), 4.0);
        let mut empty = GridMap3D::new(Vec3::new(-1.0, -2.0, 0.0), [60, 40, 10], 0.1).unwrap();
        assert!(obstacle_penalty(&traj, &empty, &w).is_err());
        empty.build_distance_field();
        assert_eq!(obstacle_penalty(&traj, &empty, &w).unwrap().value, 0.0);
        // the pillar sliding sideways monotonically relieves the penalty
        let mut last = f64::INFINITY;
        for k in 0..6 {
            let mut m = GridMap3D::new(Vec3::new(-1.0, -2.0, 0.0), [60, 40, 10], 0.1).unwrap();
            m.add_pillar((2.0, 0.1 * k as f64), 0.15);
            m.build_distance_field();
            let v = obstacle_penalty(&traj, &m, &w).unwrap().value;
            assert!(v <= last + 1e-12, "k={k}: {v} > {last}");
            last = v;
        }
        assert!(last < obstacle_penalty(&traj, &pillar_map(2.0), &w).unwrap().value);
        let map = pillar_map(2.0);
        let bent = MincoTrajectory::jerk(
            rest(Vec3::new(-0.5, 0.03, 0.52)),
            rest(Vec3::new(4.5, 0.07, 0.48)),
            vec![Vec3::new(1.83, 0.21, 0.57), Vec3::new(2.71, -0.13, 0.44)],
            vec![1.3, 1.1, 1.7],
        )
        .unwrap();
        let g = obstacle_penalty(&bent, &map, &w).unwrap();
        assert!(g.value > 0.0);
        fd_check_ct(&bent, |t| obstacle_penalty(t, &map, &w).unwrap().value, &g);
    }

    #[test]
    fn reciprocal_self_and_parallel_cases() {
        let w = PenaltyWeights::default();
        let a = line(Vec3::zeros(), Vec3::new(5.0, 0.0, 0.0), 4.0);
        let b = line(Vec3::new(0.0, 2.0 * w.swarm_clearance, 0.0), Vec3::new(5.0, 2.0 * w.swarm_clearance, 0.0), 4.0);
        let single = reciprocal_penalty(std::slice::from_ref(&a), 0, &w).unwrap();
        assert_eq!(single[0].value, 0.0);
        let pair = [a, b];
        for u in 0..2 {
            let g = reciprocal_penalty(&pair, u, &w).unwrap();
            assert!(g.iter().all(|t| t.value == 0.0 && t.dc.iter().all(|v| *v == 0.0)));
        }
        assert!(reciprocal_penalty(&pair, 2, &w).is_err());
    }

    #[test]
    fn head_on_gradients_are_opposite() {
        let w = PenaltyWeights::default();
        let a = line(Vec3::new(0.0, 0.0, 1.0), Vec3::new(4.0, 0.0, 1.0), 4.0);
        let b = line(Vec3::new(4.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0), 4.0);
        let pair = [a, b];
        let g = reciprocal_penalty(&pair, 0, &w).unwrap();
        assert!(g[0].value > 0.0);
        // coefficient gradients: u receives -beta E d, k receives +beta E d
        // at equal local times, so their position-row sums cancel
        let sum_u: Vec3 = (0..6).map(|j| crate::minco::row3(&g[0].dc, j)).sum();
        let sum_k: Vec3 = (0..6).map(|j| crate::minco::row3(&g[1].dc, j)).sum();
        assert!((sum_u + sum_k).norm() < 1e-9 * sum_u.norm().max(1.0));
    }

    /// Joint finite-difference check of sum_u Jw over every agent's (c, T).
    fn check_group(trajs: &[MincoTrajectory], w: &PenaltyWeights) {
        let total = |ts: &[MincoTrajectory]| -> f64 {
            (0..ts.len()).map(|u| reciprocal_penalty(ts, u, w).unwrap()[u].value).sum()
        };
        let mut grads: Vec<TermEval> = trajs.iter().map(TermEval::zeros).collect();
        for u in 0..trajs.len() {
            for (k, g) in reciprocal_penalty(trajs, u, w).unwrap().into_iter().enumerate() {
                let v = g.value;
                grads[k].add_scaled(&g, 1.0);
                grads[k].value -= if k == u { 0.0 } else { v };
            }
        }
        assert!(grads.iter().map(|g| g.value).sum::<f64>() > 0.0);
        for (k, tr) in trajs.iter().enumerate() {
            let (dq, dt) = tr.propagate_gradients(&grads[k].dc, &grads[k].dt).unwrap();
            let h = 1e-6;
            let with = |t: MincoTrajectory| {
                let mut ts = trajs.to_vec();
                ts[k] = t;
                total(&ts)
            };
            for i in 0..tr.waypoints().len() {
                for a in 0..3 {
                    let mut qp = tr.waypoints().to_vec();
                    let mut qm = qp.clone();
                    qp[i][a] += h;
                    qm[i][a] -= h;
                    let fd = (with(tr.with_parameters(qp, tr.durations().to_vec()).unwrap())
                        - with(tr.with_parameters(qm, tr.durations().to_vec()).unwrap()))
                        / (2.0 * h);
                    assert!((fd - dq[i][a]).abs() <= 1e-5 * fd.abs().max(1.0), "agent {k} q[{i}][{a}] fd {fd} an {}", dq[i][a]);
                }
            }
            for i in 0..tr.piece_count() {
                let mut tp = tr.durations().to_vec();
                let mut tm = tp.clone();
                tp[i] += h;
                tm[i] -= h;
                let fd = (with(tr.with_parameters(tr.waypoints().to_vec(), tp).unwrap())
                    - with(tr.with_parameters(tr.waypoints().to_vec(), tm).unwrap()))
                    / (2.0 * h);
                assert!((fd - dt[i]).abs() <= 1e-5 * fd.abs().max(1.0), "agent {k} T[{i}] fd {fd} an {}", dt[i]);
            }
        }
    }

    #[test]
    fn reciprocal_joint_gradients_match_finite_differences() {
        let w = PenaltyWeights::default();
        let a = MincoTrajectory::jerk(
            rest(Vec3::new(0.0, 0.05, 1.0)),
            rest(Vec3::new(4.0, -0.05, 1.1)),
            vec![Vec3::new(2.0, 0.11, 1.02)],
            vec![1.9, 2.3],
        )
        .unwrap();
        let b = MincoTrajectory::jerk(
            rest(Vec3::new(4.0, 0.0, 1.0)),
            rest(Vec3::new(0.0, 0.1, 0.9)),
            vec![Vec3::new(2.7, -0.08, 0.97), Vec3::new(1.2, 0.04, 1.05)],
            vec![1.4, 1.2, 1.7],
        )
        .unwrap();
        check_group(&[a.clone(), b.clone()], &w);
        // neighbor with a shorter plan is held at its terminal state
        let c = line(Vec3::new(2.0, 0.3, 1.0), Vec3::new(2.1, 0.2, 1.0), 1.5);
        check_group(&[a, b, c], &w);
    }

    #[test]
    fn neighbor_penalty_matches_reciprocal_own_block() {
        let w = PenaltyWeights::default();
        let a = line(Vec3::new(0.0, 0.0, 1.0), Vec3::new(4.0, 0.1, 1.0), 4.0);
        let b = line(Vec3::new(4.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0), 3.5);
        let pair = [a.clone(), b.clone()];
        let own = &reciprocal_penalty(&pair, 0, &w).unwrap()[0];
        let nb = neighbor_penalty(&a, &[Neighbor { traj: &b, time_offset: 0.0 }], &w);
        assert_eq!(own, &nb);
        // shifting the neighbor in time changes the encounter
        let late = neighbor_penalty(&a, &[Neighbor { traj: &b, time_offset: -1.0 }], &w);
        assert!(late.value != nb.value);
        fd_check_ct(&a, |t| neighbor_penalty(t, &[Neighbor { traj: &b, time_offset: -1.0 }], &w).value, &late);
    }

    #[test]
    fn uniformity_examples() {
        let w = PenaltyWeights::default();
        let uniform = cruise(Vec3::zeros(), Vec3::new(6.0, 3.0, 0.0), 3, 1.0);
        assert!(uniform_value(&uniform, &w) < 1e-18);
        let stretched = cruise(Vec3::zeros(), Vec3::new(6.0, 3.0, 0.0), 3, 1.0)
            .with_parameters(uniform.waypoints().to_vec(), vec![1.0, 0.5, 1.0])
            .unwrap();
        assert!(uniform_value(&stretched, &w) > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for m in 1..=4 {
            let tr = random_traj(&mut rng, m, 2.0);
            fd_check_ct(&tr, |t| uniformity_penalty(t, &w).value, &uniformity_penalty(&tr, &w));
        }
    }

    fn uniform_value(t: &MincoTrajectory, w: &PenaltyWeights) -> f64 {
        uniformity_penalty(t, w).value
    }

    #[test]
    fn quadrature_converges_with_more_samples() {
        // smooth violation: G = 1 + 0.5 sin-like profile from the quintic
        let traj = line(Vec3::zeros(), Vec3::new(3.0, 0.0, 0.0), 2.0);
        let at = |kappa: usize| {
            integral_penalty(&traj, kappa, |i, t, tr, buf| {
                let v = tr.piece_derivative(i, t, 1);
                buf.push(ConstraintSample { g: 0.5 + v.x, chi: 1.0, basis_order: 1, dir: Vec3::x(), dg_dt: 0.0 })
            })
            .value
        };
        let reference = at(4096);
        let errs: Vec<f64> = [8, 16, 32, 64].iter().map(|&k| (at(k) - reference).abs()).collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
    }

    #[test]
    fn weights_validation() {
        let mut w = PenaltyWeights::default();
        assert!(w.validate().is_ok());
        w.samples_per_piece = 1;
        assert!(w.validate().is_err());
        let mut w = PenaltyWeights::default();
        w.downwash[(0, 1)] = 0.3;
        assert!(w.validate().is_err());
        let mut w = PenaltyWeights::default();
        w.lambda.time = -1.0;
        assert!(w.validate().is_err());
        let w = PenaltyWeights::default();
        let d = w.metric_distance(&Vec3::new(0.0, 0.0, 1.0), &Vec3::zeros());
        assert!((d - 0.5).abs() < 1e-12);
    }
}
