//! Minimum-control-effort piecewise polynomial trajectories.
//!
//! A trajectory of integrator order `s` with `M` pieces is fully determined
//! by its `M - 1` intermediate waypoints, its `M` piece durations and the
//! clamped boundary states at both ends. Each piece is a polynomial of
//! degree `2s - 1`; the `2sM x 3` coefficient matrix solves a banded linear
//! system that is assembled and factorized in `O(M)`.
//!
//! Gradients of any objective `F(c, T)` are mapped back onto the
//! waypoints and durations with one adjoint solve of the same system.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{PlanError, Result};
use crate::grid_map::Vec3;

/// Default integrator order (jerk control, quintic pieces).
pub const DEFAULT_ORDER: usize = 3;

/// Position, velocity and acceleration at one end of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundaryState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

impl BoundaryState {
    pub fn at_rest(position: Vec3) -> Self {
        Self { position, velocity: Vec3::zeros(), acceleration: Vec3::zeros() }
    }

    /// `k`-th derivative; orders above acceleration are zero.
    pub fn derivative(&self, k: usize) -> Vec3 {
        match k {
            0 => self.position,
            1 => self.velocity,
            2 => self.acceleration,
            _ => Vec3::zeros(),
        }
    }
}

fn falling_factorial(n: usize, k: usize) -> f64 {
    ((n - k + 1)..=n).fold(1.0, |acc, v| acc * v as f64)
}

/// Fills `out` with the `k`-th derivative of the natural basis
/// `[1, t, ..., t^(len-1)]` at `t`.
pub fn basis_derivative(t: f64, k: usize, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j < k { 0.0 } else { falling_factorial(j, k) * t.powi((j - k) as i32) };
    }
}

/// Band-storage LU factorization without pivoting.
#[derive(Clone, Debug)]
struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandedLu {
    fn new(n: usize, lower: usize, upper: usize) -> Self {
        Self { n, lower, upper, data: vec![0.0; n * (lower + upper + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        (i + self.upper - j) * self.n + j
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        if j > i + self.upper || i > j + self.lower {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    fn factorize(&mut self) -> Result<()> {
        let n = self.n;
        for k in 0..n {
            let pivot = self.get(k, k);
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(PlanError::Numeric(format!("zero pivot at row {k}")));
            }
            let i_max = (k + self.lower).min(n - 1);
            for i in k + 1..=i_max {
                let v = self.get(i, k);
                if v != 0.0 {
                    self.set(i, k, v / pivot);
                }
            }
            let j_max = (k + self.upper).min(n - 1);
            for j in k + 1..=j_max {
                let ukj = self.get(k, j);
                if ukj == 0.0 {
                    continue;
                }
                for i in k + 1..=i_max {
                    let lik = self.get(i, k);
                    if lik != 0.0 && j <= i + self.upper {
                        let v = self.get(i, j) - lik * ukj;
                        self.set(i, j, v);
                    }
                }
            }
        }
        Ok(())
    }

    /// Solves `A x = b` in place.
    fn solve(&self, b: &mut DMatrix<f64>) {
        let n = self.n;
        for j in 0..n {
            let row = b.row(j).clone_owned();
            for i in j + 1..=(j + self.lower).min(n - 1) {
                let l = self.get(i, j);
                if l != 0.0 {
                    let mut r = b.row_mut(i);
                    r -= &row * l;
                }
            }
        }
        for j in (0..n).rev() {
            let d = self.get(j, j);
            b.row_mut(j).scale_mut(1.0 / d);
            let row = b.row(j).clone_owned();
            for i in j.saturating_sub(self.upper)..j {
                let u = self.get(i, j);
                if u != 0.0 {
                    let mut r = b.row_mut(i);
                    r -= &row * u;
                }
            }
        }
    }

    /// Solves `A^T x = b` in place.
    fn solve_adjoint(&self, b: &mut DMatrix<f64>) {
        let n = self.n;
        for j in 0..n {
            let d = self.get(j, j);
            b.row_mut(j).scale_mut(1.0 / d);
            let row = b.row(j).clone_owned();
            for i in j + 1..=(j + self.upper).min(n - 1) {
                let u = self.get(j, i);
                if u != 0.0 {
                    let mut r = b.row_mut(i);
                    r -= &row * u;
                }
            }
        }
        for j in (0..n).rev() {
            let row = b.row(j).clone_owned();
            for i in j.saturating_sub(self.lower)..j {
                let l = self.get(j, i);
                if l != 0.0 {
                    let mut r = b.row_mut(i);
                    r -= &row * l;
                }
            }
        }
    }
}

/// Row layout of the linear system for junction / boundary rows.
#[derive(Clone, Copy, Debug)]
enum RowKind {
    /// Derivative of the given order evaluated at the end of a piece.
    PieceEnd { piece: usize, order: usize },
    Other,
}

#[derive(Clone, Debug)]
pub struct MincoTrajectory {
    order: usize,
    head: BoundaryState,
    tail: BoundaryState,
    waypoints: Vec<Vec3>,
    durations: Vec<f64>,
    coeffs: DMatrix<f64>,
    lu: BandedLu,
}

impl MincoTrajectory {
    /// Builds the minimum-effort trajectory through `waypoints` with the
    /// given piece `durations` (`waypoints.len() + 1` of them).
    pub fn new(
        order: usize,
        head: BoundaryState,
        tail: BoundaryState,
        waypoints: Vec<Vec3>,
        durations: Vec<f64>,
    ) -> Result<Self> {
        if order < 1 {
            return Err(PlanError::Domain("integrator order must be >= 1".into()));
        }
        let m = durations.len();
        if m == 0 {
            return Err(PlanError::Domain("trajectory needs at least one piece".into()));
        }
        if waypoints.len() + 1 != m {
            return Err(PlanError::Contract(format!(
                "{} waypoints for {} pieces",
                waypoints.len(),
                m
            )));
        }
        if let Some(bad) = durations.iter().find(|&&t| !(t > 0.0) || !t.is_finite()) {
            return Err(PlanError::Domain(format!("piece duration must be positive, got {bad}")));
        }
        let s = order;
        let n = 2 * s * m;
        let mut lu = BandedLu::new(n, 2 * s, 2 * s);
        let mut b = DMatrix::<f64>::zeros(n, 3);
        let mut beta = vec![0.0; 2 * s];

        for k in 0..s {
            lu.set(k, k, falling_factorial(k, k));
            b.set_row(k, &head.derivative(k).transpose());
        }
        for i in 0..m - 1 {
            let t = durations[i];
            let row0 = s + 2 * s * i;
            let (cols_i, cols_next) = (2 * s * i, 2 * s * (i + 1));
            // continuity of derivatives s..2s-2
            for r in 0..s - 1 {
                let d = s + r;
                basis_derivative(t, d, &mut beta);
                for (j, v) in beta.iter().enumerate() {
                    if *v != 0.0 {
                        lu.set(row0 + r, cols_i + j, *v);
                    }
                }
                lu.set(row0 + r, cols_next + d, -falling_factorial(d, d));
            }
            // waypoint
            basis_derivative(t, 0, &mut beta);
            for (j, v) in beta.iter().enumerate() {
                lu.set(row0 + s - 1, cols_i + j, *v);
            }
            b.set_row(row0 + s - 1, &waypoints[i].transpose());
            // continuity of derivatives 0..s-1
            for d in 0..s {
                let row = row0 + s + d;
                basis_derivative(t, d, &mut beta);
                for (j, v) in beta.iter().enumerate() {
                    if *v != 0.0 {
                        lu.set(row, cols_i + j, *v);
                    }
                }
                lu.set(row, cols_next + d, -falling_factorial(d, d));
            }
        }
        let t_last = durations[m - 1];
        for k in 0..s {
            let row = n - s + k;
            basis_derivative(t_last, k, &mut beta);
            for (j, v) in beta.iter().enumerate() {
                if *v != 0.0 {
                    lu.set(row, 2 * s * (m - 1) + j, *v);
                }
            }
            b.set_row(row, &tail.derivative(k).transpose());
        }
        lu.factorize()?;
        lu.solve(&mut b);
        if b.iter().any(|v| !v.is_finite()) {
            return Err(PlanError::Numeric("non-finite coefficients".into()));
        }
        Ok(Self { order, head, tail, waypoints, durations, coeffs: b, lu })
    }

    /// Trajectory with jerk control (`s = 3`).
    pub fn jerk(
        head: BoundaryState,
        tail: BoundaryState,
        waypoints: Vec<Vec3>,
        durations: Vec<f64>,
    ) -> Result<Self> {
        Self::new(DEFAULT_ORDER, head, tail, waypoints, durations)
    }

    /// Rebuilds with new waypoints and durations, keeping boundaries.
    pub fn with_parameters(&self, waypoints: Vec<Vec3>, durations: Vec<f64>) -> Result<Self> {
        Self::new(self.order, self.head, self.tail, waypoints, durations)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Coefficients per piece (`2s`).
    pub fn piece_coeff_count(&self) -> usize {
        2 * self.order
    }

    pub fn piece_count(&self) -> usize {
        self.durations.len()
    }

    pub fn head(&self) -> &BoundaryState {
        &self.head
    }

    pub fn tail(&self) -> &BoundaryState {
        &self.tail
    }

    pub fn waypoints(&self) -> &[Vec3] {
        &self.waypoints
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn total_duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    /// Stacked `2sM x 3` coefficient matrix.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    /// Derivative of order `k` of piece `i` at local time `t`.
    pub fn piece_derivative(&self, i: usize, t: f64, k: usize) -> Vec3 {
        let n = 2 * self.order;
        let base = n * i;
        let mut out = Vec3::zeros();
        // Horner-like accumulation on the k-th derivative basis
        let mut tp = 1.0;
        for j in k..n {
            let w = falling_factorial(j, k) * tp;
            out.x += w * self.coeffs[(base + j, 0)];
            out.y += w * self.coeffs[(base + j, 1)];
            out.z += w * self.coeffs[(base + j, 2)];
            tp *= t;
        }
        out
    }

    /// Piece index and local time for a global time, clamped to
    /// `[0, total]`. The flag is set when clamping happened.
    pub fn locate(&self, t: f64) -> (usize, f64, bool) {
        if t < 0.0 {
            return (0, 0.0, true);
        }
        let mut rem = t;
        for (i, &d) in self.durations.iter().enumerate() {
            if rem <= d {
                return (i, rem, false);
            }
            rem -= d;
        }
        let last = self.durations.len() - 1;
        (last, self.durations[last], rem > 1e-12)
    }

    /// `order`-th derivative at global time `t` together with a clamp flag.
    pub fn evaluate_checked(&self, t: f64, order: usize) -> (Vec3, bool) {
        let (i, lt, clamped) = self.locate(t);
        (self.piece_derivative(i, lt, order), clamped)
    }

    pub fn evaluate(&self, t: f64, order: usize) -> Vec3 {
        self.evaluate_checked(t, order).0
    }

    pub fn position(&self, t: f64) -> Vec3 {
        self.evaluate(t, 0)
    }

    /// Kinematic state `(p, v, a)` at global time `t`.
    pub fn state(&self, t: f64) -> BoundaryState {
        BoundaryState {
            position: self.evaluate(t, 0),
            velocity: self.evaluate(t, 1),
            acceleration: self.evaluate(t, 2),
        }
    }

    fn row_kinds(&self) -> Vec<RowKind> {
        let s = self.order;
        let m = self.piece_count();
        let mut kinds = vec![RowKind::Other; 2 * s * m];
        for i in 0..m - 1 {
            let row0 = s + 2 * s * i;
            for r in 0..s - 1 {
                kinds[row0 + r] = RowKind::PieceEnd { piece: i, order: s + r };
            }
            kinds[row0 + s - 1] = RowKind::PieceEnd { piece: i, order: 0 };
            for d in 0..s {
                kinds[row0 + s + d] = RowKind::PieceEnd { piece: i, order: d };
            }
        }
        for k in 0..s {
            kinds[2 * s * m - s + k] = RowKind::PieceEnd { piece: m - 1, order: k };
        }
        kinds
    }

    /// Maps `(dF/dc, dF/dT)` to `(dJ/dq, dJ/dT)` for `J(q, T) = F(c(q, T), T)`.
    pub fn propagate_gradients(
        &self,
        df_dc: &DMatrix<f64>,
        df_dt: &[f64],
    ) -> Result<(Vec<Vec3>, Vec<f64>)> {
        let m = self.piece_count();
        if df_dc.shape() != self.coeffs.shape() || df_dt.len() != m {
            return Err(PlanError::Contract(format!(
                "gradient shapes {:?}/{} do not match trajectory {:?}/{}",
                df_dc.shape(),
                df_dt.len(),
                self.coeffs.shape(),
                m
            )));
        }
        let s = self.order;
        let mut adj = df_dc.clone_owned();
        self.lu.solve_adjoint(&mut adj);
        let dq = (0..m - 1)
            .map(|i| row3(&adj, s + 2 * s * i + s - 1))
            .collect();
        let mut dt = df_dt.to_vec();
        for (row, kind) in self.row_kinds().into_iter().enumerate() {
            if let RowKind::PieceEnd { piece, order } = kind {
                let end = self.durations[piece];
                let deriv = self.piece_derivative(piece, end, order + 1);
                dt[piece] -= row3(&adj, row).dot(&deriv);
            }
        }
        Ok((dq, dt))
    }

    /// Writes `t,x,y,z,vx,vy,vz,ax,ay,az` rows at `rate` Hz.
    pub fn write_samples_csv<W: Write>(&self, mut w: W, rate: f64, t_offset: f64) -> Result<()> {
        writeln!(w, "t,x,y,z,vx,vy,vz,ax,ay,az")?;
        let total = self.total_duration();
        let n = ((total * rate).ceil() as usize).max(1);
        for k in 0..=n {
            let t = (k as f64 / rate).min(total);
            let s = self.state(t);
            writeln!(
                w,
                "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                t + t_offset,
                s.position.x,
                s.position.y,
                s.position.z,
                s.velocity.x,
                s.velocity.y,
                s.velocity.z,
                s.acceleration.x,
                s.acceleration.y,
                s.acceleration.z
            )?;
        }
        Ok(())
    }

    /// Human-readable coefficient dump, one block per piece.
    pub fn coefficient_dump(&self) -> String {
        let n = 2 * self.order;
        let mut out = String::new();
        for i in 0..self.piece_count() {
            out.push_str(&format!("piece {i} T={:.6}\n", self.durations[i]));
            for j in 0..n {
                let r = self.coeffs.row(n * i + j);
                out.push_str(&format!("  c{j}: {:+.9e} {:+.9e} {:+.9e}\n", r[0], r[1], r[2]));
            }
        }
        out
    }
}

#[inline]
pub(crate) fn row3(m: &DMatrix<f64>, r: usize) -> Vec3 {
    Vec3::new(m[(r, 0)], m[(r, 1)], m[(r, 2)])
}

/// `T = exp(tau)` elementwise.
pub fn durations_from_tau(tau: &[f64]) -> Vec<f64> {
    tau.iter().map(|t| t.exp()).collect()
}

/// `tau = ln(T)` elementwise.
pub fn tau_from_durations(durations: &[f64]) -> Vec<f64> {
    durations.iter().map(|t| t.ln()).collect()
}

/// Chain rule through `T = exp(tau)`.
pub fn virtual_time_chain(tau: &[f64], dj_dt: &[f64]) -> Vec<f64> {
    tau.iter().zip(dj_dt).map(|(t, g)| g * t.exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rest(x: f64, y: f64, z: f64) -> BoundaryState {
        BoundaryState::at_rest(Vec3::new(x, y, z))
    }

    fn random_traj(rng: &mut ChaCha8Rng, m: usize) -> MincoTrajectory {
        let mut v = || Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let head = BoundaryState { position: v(), velocity: v(), acceleration: v() };
        let tail = BoundaryState { position: v(), velocity: v(), acceleration: v() };
        let q = (0..m - 1).map(|_| v()).collect();
        let t = (0..m).map(|_| rng.random_range(0.4..2.0)).collect();
        MincoTrajectory::jerk(head, tail, q, t).unwrap()
    }

    /// Dense reference assembly of the same system.
    fn dense_solve(traj: &MincoTrajectory) -> DMatrix<f64> {
        let n = traj.coeffs.nrows();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = traj.lu_original(i, j);
            }
        }
        let mut b = DMatrix::zeros(n, 3);
        let s = traj.order;
        let m = traj.piece_count();
        for k in 0..s {
            b.set_row(k, &traj.head.derivative(k).transpose());
            b.set_row(n - s + k, &traj.tail.derivative(k).transpose());
        }
        for i in 0..m - 1 {
            b.set_row(s + 2 * s * i + s - 1, &traj.waypoints[i].transpose());
        }
        a.lu().solve(&b).unwrap()
    }

    impl MincoTrajectory {
        /// Entry of the unfactorized system, rebuilt from the coefficients
        /// definition (test-only).
        fn lu_original(&self, row: usize, col: usize) -> f64 {
            let s = self.order;
            let n2 = 2 * s;
            let piece = col / n2;
            let j = col % n2;
            let m = self.piece_count();
            if row < s {
                return if col == row { falling_factorial(row, row) } else { 0.0 };
            }
            if row >= n2 * m - s {
                let k = row - (n2 * m - s);
                if piece != m - 1 {
                    return 0.0;
                }
                let mut b = vec![0.0; n2];
                basis_derivative(self.durations[m - 1], k, &mut b);
                return b[j];
            }
            let i = (row - s) / n2;
            let r = (row - s) % n2;
            let mut b = vec![0.0; n2];
            let (order, fixed) = if r < s - 1 {
                (s + r, false)
            } else if r == s - 1 {
                (0, true)
            } else {
                (r - s, false)
            };
            if piece == i {
                basis_derivative(self.durations[i], order, &mut b);
                b[j]
            } else if piece == i + 1 && !fixed && j == order {
                -falling_factorial(order, order)
            } else {
                0.0
            }
        }
    }

    #[test]
    fn rest_to_rest_min_jerk_quintic() {
        let traj = MincoTrajectory::jerk(rest(0.0, 0.0, 0.0), rest(1.0, 0.0, 0.0), vec![], vec![1.0]).unwrap();
        let expect = [0.0, 0.0, 0.0, 10.0, -15.0, 6.0];
        for (j, e) in expect.iter().enumerate() {
            assert!((traj.coefficients()[(j, 0)] - e).abs() < 1e-9);
            assert!(traj.coefficients()[(j, 1)].abs() < 1e-12);
        }
        assert!(traj.position(0.0).norm() < 1e-12);
        assert!(traj.evaluate(0.0, 1).norm() < 1e-12);
        assert!((traj.position(0.5).x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stationary_trajectory_has_constant_coefficients_only() {
        let p = Vec3::new(1.0, -2.0, 0.5);
        let traj = MincoTrajectory::jerk(BoundaryState::at_rest(p), BoundaryState::at_rest(p), vec![p, p], vec![0.7, 1.1, 0.9]).unwrap();
        let c = traj.coefficients();
        for i in 0..3 {
            for j in 1..6 {
                assert!(c.row(6 * i + j).norm() < 1e-9);
            }
            assert!((c.row(6 * i).transpose() - p).norm() < 1e-9);
        }
    }

    #[test]
    fn symmetric_two_piece_is_time_reversible() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(2.0, 0.0, 0.0);
        let q = Vec3::new(1.0, 1.0, 0.0);
        let fwd = MincoTrajectory::jerk(BoundaryState::at_rest(a), BoundaryState::at_rest(b), vec![q], vec![1.0, 1.0]).unwrap();
        let rev = MincoTrajectory::jerk(BoundaryState::at_rest(b), BoundaryState::at_rest(a), vec![q], vec![1.0, 1.0]).unwrap();
        for k in 0..=20 {
            let t = k as f64 * 0.1;
            assert!((fwd.position(t) - rev.position(2.0 - t)).norm() < 1e-9);
        }
        // mirrored about x = 1 as well
        for k in 0..=20 {
            let t = k as f64 * 0.1;
            let p = fwd.position(t);
            let r = fwd.position(2.0 - t);
            assert!((p.x + r.x - 2.0).abs() < 1e-9 && (p.y - r.y).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_durations() {
        assert!(matches!(
            MincoTrajectory::jerk(rest(0., 0., 0.), rest(1., 0., 0.), vec![], vec![0.0]),
            Err(PlanError::Domain(_))
        ));
        assert!(matches!(
            MincoTrajectory::jerk(rest(0., 0., 0.), rest(1., 0., 0.), vec![], vec![]),
            Err(PlanError::Domain(_))
        ));
        assert!(matches!(
            MincoTrajectory::jerk(rest(0., 0., 0.), rest(1., 0., 0.), vec![Vec3::zeros()], vec![1.0]),
            Err(PlanError::Contract(_))
        ));
    }

    #[test]
    fn evaluate_clamps_outside_range() {
        let traj = MincoTrajectory::jerk(rest(0., 0., 0.), rest(1., 0., 0.), vec![], vec![2.0]).unwrap();
        let (p, clamped) = traj.evaluate_checked(3.0, 0);
        assert!(clamped && (p.x - 1.0).abs() < 1e-12);
        let (p, clamped) = traj.evaluate_checked(-1.0, 0);
        assert!(clamped && p.norm() < 1e-12);
        assert!(!traj.evaluate_checked(1.0, 0).1);
    }

    #[test]
    fn velocity_integrates_to_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let traj = random_traj(&mut rng, 4);
        // composite Simpson on each piece
        let mut disp = Vec3::zeros();
        for i in 0..traj.piece_count() {
            let t = traj.durations()[i];
            let n = 200;
            let h = t / n as f64;
            for k in 0..=n {
                let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                disp += traj.piece_derivative(i, k as f64 * h, 1) * (w * h / 3.0);
            }
        }
        let expect = traj.position(traj.total_duration()) - traj.position(0.0);
        assert!((disp - expect).norm() < 1e-6);
    }

    #[test]
    fn banded_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in 1..=6 {
            let traj = random_traj(&mut rng, m);
            let dense = dense_solve(&traj);
            assert!((dense - traj.coefficients()).abs().max() < 1e-8, "m = {m}");
        }
    }

    #[test]
    fn zero_coefficient_gradient_passes_time_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = random_traj(&mut rng, 3);
        let zero = DMatrix::zeros(18, 3);
        let (dq, dt) = traj.propagate_gradients(&zero, &[0.3, -1.0, 2.0]).unwrap();
        assert!(dq.iter().all(|g| g.norm() == 0.0));
        assert_eq!(dt, vec![0.3, -1.0, 2.0]);
        assert!(matches!(
            traj.propagate_gradients(&DMatrix::zeros(12, 3), &[0.0; 3]),
            Err(PlanError::Contract(_))
        ));
    }

    /// F(c, T) = sum(W .* c .* c) / 2 + a . T, evaluated through the map.
    fn quadratic_objective(traj: &MincoTrajectory, w: &DMatrix<f64>, a: &[f64]) -> f64 {
        let c = traj.coefficients();
        0.5 * c.component_mul(c).component_mul(w).sum()
            + traj.durations().iter().zip(a).map(|(t, k)| t * k).sum::<f64>()
    }

    fn check_gradients(m: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traj = random_traj(&mut rng, m);
        let w = DMatrix::from_fn(6 * m, 3, |_, _| rng.random_range(0.1..1.0));
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let df_dc = traj.coefficients().component_mul(&w);
        let (dq, dt) = traj.propagate_gradients(&df_dc, &a).unwrap();
        assert_eq!(dq.len(), m - 1);
        let h = 1e-6;
        let eval = |q: Vec<Vec3>, t: Vec<f64>| quadratic_objective(&traj.with_parameters(q, t).unwrap(), &w, &a);
        for i in 0..m - 1 {
            for ax in 0..3 {
                let mut qp = traj.waypoints().to_vec();
                let mut qm = qp.clone();
                qp[i][ax] += h;
                qm[i][ax] -= h;
                let fd = (eval(qp, traj.durations().to_vec()) - eval(qm, traj.durations().to_vec())) / (2.0 * h);
                let g = dq[i][ax];
                assert!((fd - g).abs() <= 1e-6 * fd.abs().max(1.0), "dq[{i}][{ax}] fd {fd} an {g}");
            }
        }
        for i in 0..m {
            let mut tp = traj.durations().to_vec();
            let mut tm = tp.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (eval(traj.waypoints().to_vec(), tp) - eval(traj.waypoints().to_vec(), tm)) / (2.0 * h);
            assert!((fd - dt[i]).abs() <= 1e-6 * fd.abs().max(1.0), "dT[{i}] fd {fd} an {}", dt[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(1, 2);
        for seed in 0..5 {
            check_gradients(2 + seed as usize % 4, seed);
        }
    }

    #[test]
    fn virtual_time_examples() {
        assert_eq!(virtual_time_chain(&[0.0, 0.0], &[1.0, 1.0]), vec![1.0, 1.0]);
        let g = virtual_time_chain(&[2f64.ln()], &[1.0]);
        assert!((g[0] - 2.0).abs() < 1e-12);
        // J = sum T through tau: gradient equals T
        let tau = [0.3, -0.7, 1.1];
        let grad = virtual_time_chain(&tau, &[1.0; 3]);
        let h = 1e-6;
        for i in 0..3 {
            let mut tp = tau;
            let mut tm = tau;
            tp[i] += h;
            tm[i] -= h;
            let fd = (durations_from_tau(&tp).iter().sum::<f64>() - durations_from_tau(&tm).iter().sum::<f64>()) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8);
            assert!((grad[i] - tau[i].exp()).abs() < 1e-12);
        }
    }

    fn effort_by_quadrature(piece_jerk: impl Fn(f64) -> Vec3, t: f64) -> f64 {
        let n = 400;
        let h = t / n as f64;
        (0..=n)
            .map(|k| {
                let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                w * piece_jerk(k as f64 * h).norm_squared()
            })
            .sum::<f64>()
            * h
            / 3.0
    }

    #[test]
    fn construction_minimizes_effort_against_feasible_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for m in 1..=3 {
            let traj = random_traj(&mut rng, m);
            let base: f64 = (0..m)
                .map(|i| effort_by_quadrature(|t| traj.piece_derivative(i, t, 3), traj.durations()[i]))
                .sum();
            for _ in 0..5 {
                // delta(t) = eps * t^3 (T - t)^3 (a + b t) keeps positions and
                // derivatives up to order 2 fixed at both piece ends
                let pert: Vec<(Vec3, Vec3)> = (0..m)
                    .map(|_| {
                        let mut v = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                        (v(), v())
                    })
                    .collect();
                let perturbed: f64 = (0..m)
                    .map(|i| {
                        let tt = traj.durations()[i];
                        let (a, b) = pert[i];
                        let third = |t: f64| {
                            let h = 1e-3;
                            let d = |t: f64| (a + b * t) * (t.powi(3) * (tt - t).powi(3));
                            (d(t + 2.0 * h) - 2.0 * d(t + h) + 2.0 * d(t - h) - d(t - 2.0 * h)) / (2.0 * h.powi(3))
                        };
                        effort_by_quadrature(|t| traj.piece_derivative(i, t, 3) + third(t) * 0.05, tt)
                    })
                    .sum();
                assert!(perturbed >= base - 1e-6 * base.max(1.0), "{perturbed} < {base}");
            }
        }
    }

    #[test]
    fn sample_export_has_header_and_rows() {
        let traj = MincoTrajectory::jerk(rest(0., 0., 0.), rest(1., 0., 0.), vec![], vec![1.0]).unwrap();
        let mut buf = Vec::new();
        traj.write_samples_csv(&mut buf, 10.0, 0.0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x,y,z,vx,vy,vz,ax,ay,az"));
        assert_eq!(text.lines().count(), 12);
        assert!(traj.coefficient_dump().contains("piece 0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn junctions_are_continuous(seed in 0u64..10_000, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = random_traj(&mut rng, m);
            let scale = traj.coefficients().abs().max().max(1.0);
            for i in 0..m - 1 {
                let t = traj.durations()[i];
                for k in 0..=4 {
                    let l = traj.piece_derivative(i, t, k);
                    let r = traj.piece_derivative(i + 1, 0.0, k);
                    prop_assert!((l - r).norm() <= 1e-9 * scale);
                }
                prop_assert!((traj.piece_derivative(i, t, 0) - traj.waypoints()[i]).norm() <= 1e-9 * scale);
            }
            let end = traj.total_duration();
            for k in 0..3 {
                prop_assert!((traj.evaluate(0.0, k) - traj.head().derivative(k)).norm() <= 1e-9 * scale);
                prop_assert!((traj.evaluate(end, k) - traj.tail().derivative(k)).norm() <= 1e-9 * scale);
            }
        }

        #[test]
        fn tau_roundtrip(t in proptest::collection::vec(1e-3f64..1e3, 1..8)) {
            let back = durations_from_tau(&tau_from_durations(&t));
            for (a, b) in t.iter().zip(back) {
                prop_assert!((tau_from_durations(&[*a])[0] - tau_from_durations(&[b])[0]).abs() < 1e-12);
            }
        }
    }
}
