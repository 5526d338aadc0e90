//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsParams {
    /// Number of correction pairs kept.
    pub memory: usize,
    pub max_iterations: usize,
    /// Converged when `||g||_inf <= gradient_tolerance * max(1, |f|)`.
    pub gradient_tolerance: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iterations: 500,
            gradient_tolerance: 1e-4,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

/// State after an accepted iteration.
#[derive(Clone, Debug)]
pub struct Iterate<'a> {
    pub iteration: usize,
    pub x: &'a DVector<f64>,
    pub f: f64,
    pub gradient_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct LbfgsFailure {
    pub reason: String,
    /// Last accepted iterate.
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
}

/// Objective returning the value and writing the gradient.
pub trait Objective {
    fn evaluate(&mut self, x: &DVector<f64>, gradient: &mut DVector<f64>) -> f64;
}

impl<F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64> Objective for F {
    fn evaluate(&mut self, x: &DVector<f64>, gradient: &mut DVector<f64>) -> f64 {
        self(x, gradient)
    }
}

struct Probe {
    alpha: f64,
    f: f64,
    /// Directional derivative.
    d: f64,
}

struct LineSearch<'a, O: Objective> {
    objective: &'a mut O,
    x0: &'a DVector<f64>,
    dir: &'a DVector<f64>,
    f0: f64,
    d0: f64,
    c1: f64,
    c2: f64,
    evaluations: usize,
    x: DVector<f64>,
    g: DVector<f64>,
}

impl<O: Objective> LineSearch<'_, O> {
    fn probe(&mut self, alpha: f64) -> Probe {
        self.x.copy_from(self.x0);
        self.x.axpy(alpha, self.dir, 1.0);
        let f = self.objective.evaluate(&self.x, &mut self.g);
        self.evaluations += 1;
        let d = if f.is_finite() { self.g.dot(self.dir) } else { f64::NAN };
        Probe { alpha, f, d }
    }

    fn armijo_fails(&self, p: &Probe) -> bool {
        !p.f.is_finite() || p.f > self.f0 + self.c1 * p.alpha * self.d0
    }

    fn curvature_holds(&self, p: &Probe) -> bool {
        p.d.abs() <= -self.c2 * self.d0
    }

    /// Returns the accepted step with `self.x`/`self.g` at that step.
    fn run(&mut self, alpha0: f64, max_iter: usize) -> Option<Probe> {
        let mut prev = Probe { alpha: 0.0, f: self.f0, d: self.d0 };
        let mut alpha = alpha0;
        for i in 0..max_iter {
            let p = self.probe(alpha);
            if self.armijo_fails(&p) || (i > 0 && p.f >= prev.f) {
                return self.zoom(prev, p, max_iter);
            }
            if self.curvature_holds(&p) {
                return Some(p);
            }
            if p.d >= 0.0 {
                return self.zoom(p, prev, max_iter);
            }
            prev = p;
            alpha *= 2.0;
        }
        None
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe, max_iter: usize) -> Option<Probe> {
        for _ in 0..max_iter {
            let alpha = interpolate(&lo, &hi);
            if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1e-300) {
                break;
            }
            let p = self.probe(alpha);
            if self.armijo_fails(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature_holds(&p) {
                    return Some(p);
                }
                if p.d * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        // accept the best sufficient-decrease point when curvature stalls
        if lo.alpha > 0.0 && !self.armijo_fails(&lo) {
            let p = self.probe(lo.alpha);
            return Some(p);
        }
        None
    }
}

/// Safeguarded cubic interpolation between two probes, falling back to
/// bisection.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !(hi.f.is_finite() && hi.d.is_finite()) {
        return mid;
    }
    let d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.d * hi.d;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.d + d2 - d1) / (hi.d - lo.d + 2.0 * d2);
    let (min, max) = (a.min(b), a.max(b));
    let margin = 0.1 * (max - min);
    if t.is_finite() && t > min + margin && t < max - margin {
        t
    } else {
        mid
    }
}

/// Minimizes `objective` from `x0`. `on_iterate` sees every accepted
/// iterate, starting with the initial point as iteration 0.
pub fn minimize<O: Objective>(
    objective: &mut O,
    x0: DVector<f64>,
    params: &LbfgsParams,
    mut on_iterate: impl FnMut(&Iterate<'_>),
) -> Result<LbfgsOutcome, LbfgsFailure> {
    let n = x0.len();
    let mut x = x0;
    let mut g = DVector::zeros(n);
    let mut f = objective.evaluate(&x, &mut g);
    let mut evaluations = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(LbfgsFailure { reason: "non-finite objective at the initial point".into(), x, f, iterations: 0 });
    }
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(params.memory);
    let tolerance = |f: f64| params.gradient_tolerance * f.abs().max(1.0);
    on_iterate(&Iterate { iteration: 0, x: &x, f, gradient_norm: g.amax(), step: 0.0 });
    if n == 0 || g.amax() <= tolerance(f) {
        return Ok(LbfgsOutcome { x, f, gradient: g, iterations: 0, evaluations, converged: true });
    }
    let mut alpha_buf = vec![0.0; params.memory];
    for iteration in 1..=params.max_iterations {
        // two-loop recursion
        let mut dir = -&g;
        for (k, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * s.dot(&dir);
            alpha_buf[k] = a;
            dir.axpy(-a, y, 1.0);
        }
        if let Some((s, y, _)) = history.back() {
            dir *= s.dot(y) / y.dot(y);
        }
        for (k, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * y.dot(&dir);
            dir.axpy(alpha_buf[k] - b, s, 1.0);
        }
        let mut d0 = g.dot(&dir);
        if !(d0 < 0.0) {
            history.clear();
            dir = -&g;
            d0 = -g.norm_squared();
        }
        let alpha0 = if history.is_empty() { (1.0 / dir.amax()).min(1.0) } else { 1.0 };
        let mut ls = LineSearch {
            objective,
            x0: &x,
            dir: &dir,
            f0: f,
            d0,
            c1: params.c1,
            c2: params.c2,
            evaluations: 0,
            x: x.clone(),
            g: g.clone(),
        };
        let accepted = ls.run(alpha0, params.max_line_search);
        evaluations += ls.evaluations;
        let (nx, ng) = (ls.x, ls.g);
        let Some(probe) = accepted else {
            return Err(LbfgsFailure {
                reason: format!("line search failed at iteration {iteration}"),
                x,
                f,
                iterations: iteration - 1,
            });
        };
        let s = &nx - &x;
        let y = &ng - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * y.norm_squared().max(f64::MIN_POSITIVE) {
            if history.len() == params.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = nx;
        g = ng;
        f = probe.f;
        let gn = g.amax();
        on_iterate(&Iterate { iteration, x: &x, f, gradient_norm: gn, step: probe.alpha });
        if gn <= tolerance(f) {
            return Ok(LbfgsOutcome { x, f, gradient: g, iterations: iteration, evaluations, converged: true });
        }
    }
    Ok(LbfgsOutcome { x, f, gradient: g, iterations: params.max_iterations, evaluations, converged: false })
}
